"""Command-line front door: prepare / synth / train / denoise / eval.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 runtime
failure.  Diagnostics go to stderr; results go to files only.

A "pairs directory" is the on-disk currency between stages: matching
basenames under <dir>/noisy/ and <dir>/clean/.  `prepare` and `synth`
produce one, `train` and `eval` consume one.

Every flag can also come from a plain-text config file of `key = value`
lines (# comments allowed), given with --config; explicit flags win over
file values, file values win over defaults.  --threads pins the BLAS thread
count and is applied before numpy is first imported, so numeric results
with --threads 1 are bit-reproducible.
"""
from __future__ import annotations

import argparse
import os
import sys


class UsageError(ValueError):
    """Bad flags, bad config-file entries, inconsistent options."""


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _fmt(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=34)


def build_parser() -> _Parser:
    p = _Parser(prog="octdn", allow_abbrev=False, formatter_class=_fmt,
                description="Speckle denoising for OCT-style grayscale "
                            "images: residual-CNN training and inference, "
                            "averaging-based ground truth, classical "
                            "baselines, PSNR/SSIM reports.")
    p.add_argument("--threads", type=int, default=None, metavar="N",
                   help="pin BLAS/OpenMP thread count (1 = bit-reproducible)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    p.octdn_subparsers = sub

    q = sub.add_parser("prepare", formatter_class=_fmt, allow_abbrev=False,
                       help="build (noisy, clean) pairs from repeated-scan "
                            "volumes by register-and-average")
    q.add_argument("volumes_dir", help="directory of volume subdirectories "
                                       "(each a stack of numbered slices)")
    q.add_argument("out_dir", help="pairs directory to create")
    q.add_argument("--config", default=None, help="key = value config file")
    q.add_argument("--target-index", type=int, default=0,
                   help="index of the volume denoised against the others")
    q.add_argument("--m", dest="M", type=int, default=20,
                   help="expected number of volumes in the stack")
    q.add_argument("--n", dest="N", type=int, default=7,
                   help="nearby B-scans taken from each other volume")
    q.add_argument("--l", dest="L", type=int, default=10,
                   help="best-SSIM candidates averaged with the target")
    q.add_argument("--crop", default=None, metavar="Y0,Y1,X0,X1",
                   help="restrict processing to a fixed window")
    q.add_argument("--ext", choices=("pgm", "tns"), default="pgm",
                   help="output image format")
    q.set_defaults(func=cmd_prepare)

    q = sub.add_parser("synth", formatter_class=_fmt, allow_abbrev=False,
                       help="speckle clean images into (noisy, clean) pairs")
    q.add_argument("clean_dir", help="directory of clean .pgm/.tns images")
    q.add_argument("out_dir", help="pairs directory to create")
    q.add_argument("--config", default=None, help="key = value config file")
    q.add_argument("--looks", type=float, default=4.0,
                   help="gamma shape of the unit-mean speckle multiplier")
    q.add_argument("--seed", type=int, default=0, help="speckle rng seed")
    q.add_argument("--ext", choices=("pgm", "tns"), default="pgm",
                   help="output image format")
    q.set_defaults(func=cmd_synth)

    q = sub.add_parser("train", formatter_class=_fmt, allow_abbrev=False,
                       help="train the noise-prediction network on a pairs "
                            "directory")
    q.add_argument("pairs_dir", help="directory with noisy/ and clean/")
    q.add_argument("checkpoint", help="output checkpoint path")
    q.add_argument("--config", default=None, help="key = value config file")
    q.add_argument("--patch-size", type=int, default=128,
                   help="square training patch edge length")
    q.add_argument("--patch-stride", type=int, default=64,
                   help="patch grid stride")
    q.add_argument("--variance-floor", type=float, default=1e-4,
                   help="minimum clean-patch variance to keep a patch")
    q.add_argument("--epochs", type=int, default=100,
                   help="maximum training epochs")
    q.add_argument("--batch-size", type=int, default=16,
                   help="patches per optimizer step")
    q.add_argument("--learning-rate", type=float, default=1e-3,
                   help="optimizer step size")
    q.add_argument("--beta1", type=float, default=0.9,
                   help="first-moment decay of the optimizer")
    q.add_argument("--beta2", type=float, default=0.999,
                   help="second-moment decay of the optimizer")
    q.add_argument("--eps", type=float, default=1e-8,
                   help="optimizer denominator stabilizer")
    q.add_argument("--hflip", dest="augment_hflip", action="store_true",
                   default=True, help="augment with horizontal flips")
    q.add_argument("--no-hflip", dest="augment_hflip", action="store_false",
                   help="disable horizontal-flip augmentation")
    q.add_argument("--validation-fraction", type=float, default=0.1,
                   help="share of patches held out for validation")
    q.add_argument("--patience", type=int, default=10,
                   help="epochs without validation improvement before stopping")
    q.add_argument("--seed", type=int, default=0, help="training rng seed")
    q.add_argument("--precision", choices=("32", "64"), default="32",
                   help="training storage precision")
    q.add_argument("--loss-csv", default=None,
                   help="loss history CSV path (default: <checkpoint>.loss.csv)")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("denoise", formatter_class=_fmt, allow_abbrev=False,
                       help="apply a trained checkpoint to images")
    q.add_argument("checkpoint", help="trained checkpoint path")
    q.add_argument("inputs", nargs="+",
                   help="image files, or a single directory of images")
    q.add_argument("out_dir", help="directory for denoised images")
    q.add_argument("--config", default=None, help="key = value config file")
    q.add_argument("--precision", choices=("32", "64"), default="32",
                   help="inference precision")
    q.set_defaults(func=cmd_denoise)

    q = sub.add_parser("eval", formatter_class=_fmt, allow_abbrev=False,
                       help="score denoising methods on a pairs directory")
    q.add_argument("pairs_dir", help="directory with noisy/ and clean/")
    q.add_argument("out_prefix", help="writes <prefix>.csv and <prefix>.txt")
    q.add_argument("--config", default=None, help="key = value config file")
    q.add_argument("--methods", default="noisy,median,nlm",
                   help="comma list from {noisy, median, nlm, model}")
    q.add_argument("--checkpoint", default=None,
                   help="checkpoint for the model method")
    q.add_argument("--median-window", type=int, default=None,
                   help="median window (default: sweep 3,5,7 for best PSNR)")
    q.add_argument("--nlm-patch-radius", type=int, default=None,
                   help="NLM patch radius (default: small-grid sweep)")
    q.add_argument("--nlm-search-radius", type=int, default=None,
                   help="NLM search radius (default: small-grid sweep)")
    q.add_argument("--nlm-strength", type=float, default=None,
                   help="NLM weight falloff (default: small-grid sweep)")
    q.add_argument("--roi", default=None, metavar="Y0,Y1,X0,X1",
                   help="score only inside this window")
    q.add_argument("--precision", choices=("32", "64"), default="32",
                   help="model inference precision")
    q.set_defaults(func=cmd_eval)
    return p


# ---------------------------------------------------------------------------
# config-file merging: flag > file > default

_BOOL_WORDS = {"1": True, "true": True, "yes": True, "on": True,
               "0": False, "false": False, "no": False, "off": False}


def parse_config_file(path) -> dict:
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{ln}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if not key:
                raise UsageError(f"{path}:{ln}: empty key")
            out[key] = val
    return out


def _coerce(raw: str, like):
    if isinstance(like, bool):
        try:
            return _BOOL_WORDS[raw.lower()]
        except KeyError:
            raise ValueError(f"not a boolean: {raw!r}") from None
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def apply_config_file(args, parser_actions, argv) -> None:
    """Overlay file values onto args for every flag not given on argv."""
    if not getattr(args, "config", None):
        return
    file_vals = parse_config_file(args.config)
    by_dest = {}
    for action in parser_actions:
        if action.option_strings and action.dest != "help":
            by_dest.setdefault(action.dest, []).extend(action.option_strings)
    for key, raw in file_vals.items():
        dest = key.strip().replace("-", "_")
        if dest not in by_dest or dest == "config":
            raise UsageError(f"unknown config key {key!r}")
        explicit = any(
            opt in argv or any(a.startswith(opt + "=") for a in argv)
            for opt in by_dest[dest])
        if explicit:
            continue
        current = getattr(args, dest)
        like = current if current is not None else ""
        try:
            setattr(args, dest, _coerce(raw, like))
        except ValueError as e:
            raise UsageError(f"config key {key!r}: {e}") from None


def _set_thread_env(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _parse_window(text):
    try:
        parts = [int(s) for s in text.split(",")]
    except ValueError:
        raise UsageError(f"expected Y0,Y1,X0,X1, got {text!r}") from None
    if len(parts) != 4:
        raise UsageError(f"expected Y0,Y1,X0,X1, got {text!r}")
    return tuple(parts)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# pairs-directory helpers (imported lazily by the commands that need numpy)

def _list_images(directory):
    names = sorted(n for n in os.listdir(directory)
                   if os.path.splitext(n)[1].lower() in (".pgm", ".tns"))
    if not names:
        raise FileNotFoundError(f"{directory}: no .pgm/.tns images")
    return names


def _load_pairs(pairs_dir):
    from .dataprep import read_image
    noisy_dir = os.path.join(pairs_dir, "noisy")
    clean_dir = os.path.join(pairs_dir, "clean")
    if not os.path.isdir(noisy_dir) or not os.path.isdir(clean_dir):
        raise FileNotFoundError(
            f"{pairs_dir}: expected noisy/ and clean/ subdirectories")
    names = _list_images(noisy_dir)
    pairs = []
    for name in names:
        clean_path = os.path.join(clean_dir, name)
        if not os.path.exists(clean_path):
            raise FileNotFoundError(f"{clean_path}: missing clean partner")
        pairs.append((read_image(os.path.join(noisy_dir, name)),
                      read_image(clean_path)))
    return names, pairs


def _write_pairs(out_dir, names, pairs, ext):
    from .dataprep import write_image
    os.makedirs(os.path.join(out_dir, "noisy"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "clean"), exist_ok=True)
    for name, (noisy, clean) in zip(names, pairs):
        stem = os.path.splitext(name)[0]
        write_image(noisy, os.path.join(out_dir, "noisy", f"{stem}.{ext}"))
        write_image(clean, os.path.join(out_dir, "clean", f"{stem}.{ext}"))


# ---------------------------------------------------------------------------
# subcommands

def cmd_prepare(args) -> int:
    from .dataprep import GroundTruthConfig, build_ground_truth, load_volume
    vol_dirs = sorted(
        os.path.join(args.volumes_dir, d)
        for d in os.listdir(args.volumes_dir)
        if os.path.isdir(os.path.join(args.volumes_dir, d)))
    if not vol_dirs:
        raise FileNotFoundError(f"{args.volumes_dir}: no volume subdirectories")
    _log(f"loading {len(vol_dirs)} volumes")
    volumes = [load_volume(d) for d in vol_dirs]
    cfg = GroundTruthConfig(M=args.M, N=args.N, L=args.L)
    crop = _parse_window(args.crop) if args.crop else None
    pairs = build_ground_truth(volumes, args.target_index, cfg, crop=crop)
    names = [f"{i:04d}.{args.ext}" for i in range(len(pairs))]
    _write_pairs(args.out_dir, names, pairs, args.ext)
    _log(f"wrote {len(pairs)} pairs to {args.out_dir}")
    return 0


def cmd_synth(args) -> int:
    import numpy as np
    from .dataprep import SpeckleConfig, add_speckle, read_image
    names = _list_images(args.clean_dir)
    cfg = SpeckleConfig(looks=args.looks, rng_seed=args.seed)
    rng = np.random.default_rng(cfg.rng_seed)
    pairs = []
    for name in names:
        clean = read_image(os.path.join(args.clean_dir, name))
        pairs.append((add_speckle(clean, cfg, rng=rng), clean))
    _write_pairs(args.out_dir, names, pairs, args.ext)
    _log(f"wrote {len(pairs)} speckled pairs to {args.out_dir}")
    return 0


def _train_config(args):
    from .train import TrainConfig
    return TrainConfig(
        patch_size=args.patch_size, patch_stride=args.patch_stride,
        variance_floor=args.variance_floor, epochs=args.epochs,
        batch_size=args.batch_size, learning_rate=args.learning_rate,
        betas=(args.beta1, args.beta2), eps=args.eps,
        augment_hflip=args.augment_hflip,
        validation_fraction=args.validation_fraction,
        early_stop_patience=args.patience, rng_seed=args.seed)


def cmd_train(args) -> int:
    import numpy as np
    from .model import save_checkpoint
    from .train import extract_patches, train_loop, write_loss_csv
    cfg = _train_config(args)
    _, pairs = _load_pairs(args.pairs_dir)
    dataset = []
    for noisy, clean in pairs:
        dataset.extend(extract_patches(noisy, clean, cfg))
    if not dataset:
        raise ValueError("no patches survived extraction; lower "
                         "--variance-floor or check the pairs")
    _log(f"{len(dataset)} patches from {len(pairs)} pairs")
    dtype = np.float32 if args.precision == "32" else np.float64
    ckpt, history = train_loop(
        dataset, cfg, dtype=dtype,
        log=lambda e, t, v: _log(f"epoch {e}: train {t:.6f} val {v:.6f}"))
    save_checkpoint(ckpt, args.checkpoint)
    loss_csv = args.loss_csv or f"{args.checkpoint}.loss.csv"
    write_loss_csv(history, loss_csv)
    _log(f"checkpoint {args.checkpoint} (best epoch {ckpt.epoch}); "
         f"history {loss_csv}")
    return 0


def cmd_denoise(args) -> int:
    import numpy as np
    from .dataprep import read_image, write_image
    from .model import denoise, load_checkpoint
    dtype = np.float32 if args.precision == "32" else np.float64
    net = load_checkpoint(args.checkpoint).to_network(dtype=dtype)
    inputs = args.inputs
    if len(inputs) == 1 and os.path.isdir(inputs[0]):
        base = inputs[0]
        inputs = [os.path.join(base, n) for n in _list_images(base)]
    os.makedirs(args.out_dir, exist_ok=True)
    for path in inputs:
        img = read_image(path)
        out = denoise(img, net)
        dest = os.path.join(args.out_dir, os.path.basename(path))
        write_image(out, dest)
        _log(f"{path} -> {dest}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np
    from .eval import (best_median, best_nlm, evaluate_report, median_filter,
                       nlm_filter)
    names, pairs = _load_pairs(args.pairs_dir)
    wanted = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = set(wanted) - {"noisy", "median", "nlm", "model"}
    if unknown:
        raise UsageError(f"unknown methods {sorted(unknown)}")
    methods = {}
    if "noisy" in wanted:
        methods["noisy"] = lambda img: img
    if "median" in wanted:
        if args.median_window is not None:
            win = args.median_window
        else:
            win, score = best_median(pairs)
            _log(f"median sweep: window {win} ({score:.2f} dB)")
        methods[f"median{win}"] = lambda img, w=win: median_filter(img, w)
    if "nlm" in wanted:
        pr, sr, st = (args.nlm_patch_radius, args.nlm_search_radius,
                      args.nlm_strength)
        if pr is None or sr is None or st is None:
            (spr, ssr, sst), score = best_nlm(pairs)
            pr, sr, st = (pr or spr), (sr or ssr), (st or sst)
            _log(f"nlm sweep: patch {pr} search {sr} strength {st} "
                 f"({score:.2f} dB)")
        methods["nlm"] = lambda img, a=pr, b=sr, c=st: nlm_filter(img, a, b, c)
    if "model" in wanted:
        if not args.checkpoint:
            raise UsageError("the model method needs --checkpoint")
        from .model import denoise, load_checkpoint
        dtype = np.float32 if args.precision == "32" else np.float64
        net = load_checkpoint(args.checkpoint).to_network(dtype=dtype)
        methods["model"] = lambda img: denoise(img, net)
    roi_mask = None
    if args.roi:
        y0, y1, x0, x1 = _parse_window(args.roi)
        roi_mask = np.zeros(pairs[0][0].shape, dtype=bool)
        roi_mask[y0:y1, x0:x1] = True
    report = evaluate_report(pairs, methods, roi=roi_mask)
    report.to_csv(f"{args.out_prefix}.csv")
    with open(f"{args.out_prefix}.txt", "w") as f:
        f.write(report.to_text())
    _log(f"report: {args.out_prefix}.csv, {args.out_prefix}.txt")
    return 0


# ---------------------------------------------------------------------------

def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    if args.threads is not None:
        if args.threads < 1:
            sys.stderr.write("octdn: error: --threads must be >= 1\n")
            return 1
        _set_thread_env(args.threads)

    subparser = parser.octdn_subparsers.choices.get(args.command)
    try:
        if subparser is not None:
            apply_config_file(args, subparser._actions, argv)
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        from .errors import DataFormatError, ShapeError
        sys.stderr.write(f"octdn: error: {e}\n")
        if isinstance(e, UsageError):
            return 1
        if isinstance(e, (DataFormatError, ShapeError, FileNotFoundError)):
            return 2
        return 3


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)
