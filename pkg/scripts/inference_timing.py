#!/usr/bin/env python3
"""Measure wall time of each denoising method across image sizes.

Times the trained (or randomly initialized) network against the median and
non-local-means baselines on random images, one size per row, and prints a
plain table.  Network inference should scale close to linearly with pixel
count; the baselines show their own scaling.
"""
import argparse
import sys
import time

import numpy as np

from octdn.eval import median_filter, nlm_filter
from octdn.model import Network, denoise, load_checkpoint
import octdn.nn


def time_call(fn, img, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(img)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(
        description=__doc__.splitlines()[0],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--checkpoint", default=None,
                    help="trained checkpoint (default: random weights)")
    ap.add_argument("--sizes", default="64,128,256,512",
                    help="comma list of square image edge lengths")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if args.checkpoint:
        net = load_checkpoint(args.checkpoint).to_network(np.float32)
    else:
        net = Network(rng=np.random.default_rng(args.seed),
                      dtype=np.float32)
        print("no checkpoint given, timing randomly initialized weights",
              file=sys.stderr)

    sizes = [int(s) for s in args.sizes.split(",")]
    methods = {
        "model": lambda img: denoise(img, net),
        "median5": lambda img: median_filter(img, 5),
        "nlm": lambda img: nlm_filter(img),
    }
    rng = np.random.default_rng(args.seed + 1)
    print(f"{'size':>9}  " + "".join(f"{m:>12}" for m in methods))
    for size in sizes:
        img = rng.random((size, size))
        # warm up allocations before timing the model
        denoise(img, net)
        cells = [time_call(fn, img, args.repeats) for fn in methods.values()]
        print(f"{size:>4}x{size:<4}  "
              + "".join(f"{c:>11.3f}s" for c in cells))
    octdn.nn.clear_scratch()


if __name__ == "__main__":
    main()
