"""Patch-based training: residual MSE loss, Adam-style steps, early stopping.

The network learns to predict the noise component N = noisy - clean of a
patch; the loss is the mean over batch and pixels of (prediction - N)^2.
Patches come from a stride grid with a final flush row/column so the image
edge is always covered, filtered by a clean-patch variance floor so flat
glare/background patches don't dominate.

Training defaults to float32 storage for speed (the float64 path is the
reference and is what gradient checks run on); checkpoints always store
float64.  With a fixed rng_seed and single-threaded BLAS the whole loop is
bit-reproducible.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingDivergedError
from .model import Checkpoint, Network, NetworkSpec
from .nn import Mode, clear_scratch

DEFAULT_PATCH = 128


@dataclass
class TrainConfig:
    patch_size: int = DEFAULT_PATCH
    patch_stride: int = 64
    variance_floor: float = 1e-4
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    augment_hflip: bool = True
    validation_fraction: float = 0.1
    early_stop_patience: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_stride < 1:
            raise ValueError("patch_size and patch_stride must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be > 0")


@dataclass
class PatchPair:
    noisy: np.ndarray
    clean: np.ndarray
    noise: np.ndarray = None

    def __post_init__(self):
        self.noisy = np.asarray(self.noisy, dtype=np.float64)
        self.clean = np.asarray(self.clean, dtype=np.float64)
        if self.noisy.shape != self.clean.shape:
            raise ShapeError(
                f"dimension mismatch: {self.noisy.shape} vs {self.clean.shape}")
        if self.noise is None:
            self.noise = self.noisy - self.clean
        else:
            self.noise = np.asarray(self.noise, dtype=np.float64)
            if self.noise.shape != self.noisy.shape:
                raise ShapeError(
                    f"dimension mismatch: {self.noise.shape} vs {self.noisy.shape}")


def loss_eq1(predicted: np.ndarray, noisy: np.ndarray, clean: np.ndarray):
    """Mean squared error against the noise target, with its gradient.

    Returns (loss, dloss/dpredicted); the gradient is 2*(predicted - N)/count
    in the dtype of `predicted`.
    """
    if predicted.shape != noisy.shape or noisy.shape != clean.shape:
        raise ShapeError(
            f"dimension mismatch: {predicted.shape} vs {noisy.shape} "
            f"vs {clean.shape}")
    target = noisy - clean
    diff = predicted - target.astype(predicted.dtype, copy=False)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    diff *= predicted.dtype.type(2.0 / diff.size)
    return loss, diff


@dataclass
class OptimizerState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def optimizer_step(params, grads, state: OptimizerState,
                   config: TrainConfig) -> None:
    """One adaptive-moment update with bias correction, in place."""
    b1, b2 = config.betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None or not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient at parameter {i}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


def extract_patches(noisy: np.ndarray, clean: np.ndarray,
                    config: TrainConfig) -> list:
    """Stride-grid patches plus an edge-flush row/column; a patch is kept
    only if its clean part has intensity variance >= the floor."""
    noisy = np.asarray(noisy, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if noisy.shape != clean.shape:
        raise ShapeError(
            f"dimension mismatch: {noisy.shape} vs {clean.shape}")
    h, w = noisy.shape
    ps, stride = config.patch_size, config.patch_stride
    if h < ps or w < ps:
        raise ShapeError(f"image {h}x{w} smaller than patch {ps}")

    def positions(extent):
        pos = list(range(0, extent - ps + 1, stride))
        if pos[-1] != extent - ps:
            pos.append(extent - ps)
        return pos

    pairs = []
    for y in positions(h):
        for x in positions(w):
            cp = clean[y:y + ps, x:x + ps]
            if float(np.var(cp)) >= config.variance_floor:
                pairs.append(PatchPair(noisy[y:y + ps, x:x + ps].copy(),
                                       cp.copy()))
    return pairs


def grid_patch_count(h: int, w: int, config: TrainConfig) -> int:
    """Closed-form patch count when the variance floor accepts everything."""
    def count(extent):
        ps, s = config.patch_size, config.patch_stride
        n = (extent - ps) // s + 1
        if (n - 1) * s != extent - ps:
            n += 1
        return n
    return count(h) * count(w)


def augment(pair: PatchPair, config: TrainConfig, rng) -> PatchPair:
    """Horizontal flip with probability 1/2 (never vertical: layer order in
    a B-scan is anatomical)."""
    if not config.augment_hflip:
        return pair
    if rng.random() < 0.5:
        return PatchPair(np.ascontiguousarray(pair.noisy[:, ::-1]),
                         np.ascontiguousarray(pair.clean[:, ::-1]))
    return pair


def _batch_tensor(pairs, attr, dtype):
    return np.stack([getattr(p, attr) for p in pairs]).astype(dtype)[..., None]


def train_loop(dataset: list, config: TrainConfig, net: Network = None,
               dtype=np.float32, log=None):
    """Minimize the residual loss over patch pairs; returns the checkpoint
    of the best-validation epoch plus the (epoch, train, val) history."""
    if not dataset:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(config.rng_seed)
    if net is None:
        net = Network(NetworkSpec(), rng=rng, dtype=dtype)
    params = net.params()
    state = OptimizerState.for_params(params)

    nval = int(round(config.validation_fraction * len(dataset)))
    nval = min(nval, len(dataset) - 1)
    perm = rng.permutation(len(dataset))
    val_set = [dataset[i] for i in perm[:nval]]
    train_set = [dataset[i] for i in perm[nval:]]
    if not train_set:
        raise ValueError("empty training split after validation hold-out")

    history = []
    best_val = np.inf
    best_epoch = -1
    best_arrays = None
    patience_left = config.early_stop_patience

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [augment(train_set[i], config, rng)
                     for i in order[start:start + config.batch_size]]
            xb = _batch_tensor(batch, "noisy", dtype)
            nb = _batch_tensor(batch, "noise", dtype)
            pred = net.forward(xb, Mode.TRAIN)
            diff = pred - nb
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, "
                    f"batch {start // config.batch_size}")
            diff *= dtype(2.0 / diff.size)
            net.backward(diff)
            optimizer_step(params, net.grads(), state, config)
            total += loss * xb.shape[0]
            count += xb.shape[0]
        train_loss = total / count

        if val_set:
            vtotal, vcount = 0.0, 0
            for start in range(0, len(val_set), config.batch_size):
                vb = val_set[start:start + config.batch_size]
                xb = _batch_tensor(vb, "noisy", dtype)
                nb = _batch_tensor(vb, "noise", dtype)
                pred = net.forward(xb, Mode.INFER)
                sq = (pred.astype(np.float64) - nb.astype(np.float64)) ** 2
                vtotal += float(sq.sum())
                vcount += sq.size
            val_loss = vtotal / vcount
        else:
            val_loss = train_loss

        history.append((epoch, train_loss, val_loss))
        if log is not None:
            log(epoch, train_loss, val_loss)

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_arrays = net.param_arrays()
            patience_left = config.early_stop_patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break

    net.load_param_arrays(best_arrays)
    clear_scratch()
    ckpt = Checkpoint.from_network(net, epoch=best_epoch,
                                   seed=config.rng_seed, loss_history=history)
    return ckpt, history


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, train_loss, val_loss in history:
            writer.writerow([epoch, repr(float(train_loss)),
                             repr(float(val_loss))])
