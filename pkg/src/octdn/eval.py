"""Quality metrics (PSNR, windowed SSIM), classical baselines, reporting.

PSNR on identical images is a distinct outcome (returned as inf, flagged in
reports, excluded from aggregates).  SSIM follows the standard 11x11
Gaussian sigma=1.5 window and is averaged over fully interior window
positions only.  The median and non-local-means filters use edge-replicate
padding and come with brute-force oracles in the test suite.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


@dataclass
class SsimConfig:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    window: int = 11
    sigma: float = 1.5

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilizers must be > 0")
        if self.window % 2 != 1 or self.window < 1:
            raise ValueError(f"window must be odd, got {self.window}")


def gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _gauss_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode Gaussian filtering."""
    tmp = sliding_window_view(img, k.size, axis=0) @ k
    return sliding_window_view(tmp, k.size, axis=1) @ k


def psnr(test: np.ndarray, reference: np.ndarray, peak: float = 1.0,
         roi: np.ndarray = None) -> float:
    """10*log10(peak^2 / MSE); inf marks the identical-images outcome."""
    test = np.asarray(test, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if test.shape != reference.shape:
        raise ShapeError(
            f"dimension mismatch: {test.shape} vs {reference.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    diff = test - reference
    if roi is not None:
        roi = np.asarray(roi, dtype=bool)
        if roi.shape != test.shape:
            raise ShapeError(
                f"dimension mismatch: roi {roi.shape} vs {test.shape}")
        if not roi.any():
            raise ValueError("empty ROI mask")
        diff = diff[roi]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a: np.ndarray, b: np.ndarray, config: SsimConfig = None) -> float:
    """Mean local SSIM over interior window positions; in [-1, 1]."""
    cfg = config or SsimConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < cfg.window or a.shape[1] < cfg.window:
        raise ShapeError(
            f"image {a.shape} smaller than {cfg.window}x{cfg.window} window")
    k = gaussian_kernel_1d(cfg.window, cfg.sigma)
    mu_a = _gauss_valid(a, k)
    mu_b = _gauss_valid(b, k)
    var_a = _gauss_valid(a * a, k) - mu_a * mu_a
    var_b = _gauss_valid(b * b, k) - mu_b * mu_b
    cov = _gauss_valid(a * b, k) - mu_a * mu_b
    c1, c2 = cfg.c1, cfg.c2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def median_filter(img: np.ndarray, window: int) -> np.ndarray:
    """Window-median with edge-replicate padding."""
    if window % 2 != 1 or window < 1:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    img = np.asarray(img, dtype=np.float64)
    if window == 1:
        return img.copy()
    p = window // 2
    padded = np.pad(img, p, mode="edge")
    views = sliding_window_view(padded, (window, window))
    return np.median(views, axis=(2, 3))


def _box_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    """Sum over (2r+1)^2 boxes, same size output, via a summed-area table.
    The caller must have padded `arr` by >= r on every side already."""
    s = np.cumsum(np.cumsum(arr, axis=0), axis=1)
    s = np.pad(s, ((1, 0), (1, 0)))
    d = 2 * radius + 1
    h, w = arr.shape[0] - 2 * radius, arr.shape[1] - 2 * radius
    return (s[d:d + h, d:d + w] - s[:h, d:d + w]
            - s[d:d + h, :w] + s[:h, :w])


def nlm_filter(img: np.ndarray, patch_radius: int = 1,
               search_radius: int = 3, strength: float = 0.1) -> np.ndarray:
    """Non-local means: weighted average over a search window, weights from
    mean squared patch differences, w = exp(-d/strength^2).  The self weight
    is the maximum weight given to any other candidate (so the center pixel
    never dominates).  Edge handling by replicate padding."""
    if patch_radius < 1 or search_radius < 1:
        raise ValueError("radii must be >= 1")
    if strength <= 0:
        raise ValueError(f"strength must be > 0, got {strength}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    pr, sr = patch_radius, search_radius
    pad = pr + sr
    padded = np.pad(img, pad, mode="edge")
    patch_count = (2 * pr + 1) ** 2
    inv_h2 = 1.0 / (strength * strength)

    center = padded[sr:sr + h + 2 * pr, sr:sr + w + 2 * pr]
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    wmax = np.zeros((h, w))
    for dy in range(-sr, sr + 1):
        for dx in range(-sr, sr + 1):
            if dy == 0 and dx == 0:
                continue
            shifted = padded[sr + dy:sr + dy + h + 2 * pr,
                             sr + dx:sr + dx + w + 2 * pr]
            diff2 = (center - shifted) ** 2
            dist = _box_sum(diff2, pr) / patch_count
            wgt = np.exp(-dist * inv_h2)
            num += wgt * shifted[pr:pr + h, pr:pr + w]
            den += wgt
            np.maximum(wmax, wgt, out=wmax)
    num += wmax * img
    den += wmax
    return num / den


# ---------------------------------------------------------------------------
# parameter sweeps for the baselines

def best_median(pairs, windows=(3, 5, 7)):
    """Pick the window with the best mean PSNR on (noisy, clean) pairs."""
    best = None
    for win in windows:
        vals = [psnr(median_filter(n, win), c) for n, c in pairs]
        mean = float(np.mean(vals))
        if best is None or mean > best[1]:
            best = (win, mean)
    return best


def best_nlm(pairs, patch_radii=(1, 2), search_radii=(3, 5),
             strengths=(0.05, 0.1, 0.2, 0.4)):
    """Grid-search NLM parameters for the best mean PSNR; returns
    ((patch_radius, search_radius, strength), mean_psnr)."""
    best = None
    for pr in patch_radii:
        for sr in search_radii:
            for st in strengths:
                vals = [psnr(nlm_filter(n, pr, sr, st), c) for n, c in pairs]
                mean = float(np.mean(vals))
                if best is None or mean > best[1]:
                    best = ((pr, sr, st), mean)
    return best


# ---------------------------------------------------------------------------
# reporting

@dataclass
class ReportRow:
    image_id: str
    method: str
    psnr_db: float = None
    ssim: float = None
    time_s: float = None
    error: str = None


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def methods(self):
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def aggregates(self) -> dict:
        """Per-method means; non-finite PSNR rows are flagged, not averaged."""
        out = {}
        for m in self.methods():
            rows = [r for r in self.rows if r.method == m]
            finite = [r.psnr_db for r in rows
                      if r.psnr_db is not None and math.isfinite(r.psnr_db)]
            ssims = [r.ssim for r in rows if r.ssim is not None]
            times = [r.time_s for r in rows if r.time_s is not None]
            out[m] = {
                "mean_psnr_db": float(np.mean(finite)) if finite else None,
                "mean_ssim": float(np.mean(ssims)) if ssims else None,
                "mean_time_s": float(np.mean(times)) if times else None,
                "rows": len(rows),
                "flagged_identical": sum(
                    1 for r in rows
                    if r.psnr_db is not None and math.isinf(r.psnr_db)),
                "failed": sum(1 for r in rows if r.error is not None),
            }
        return out

    def to_csv(self, path) -> None:
        def cell(v):
            if v is None:
                return ""
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            return repr(float(v))
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["image_id", "method", "psnr_db", "ssim", "time_s"])
            for r in self.rows:
                writer.writerow([r.image_id, r.method, cell(r.psnr_db),
                                 cell(r.ssim), cell(r.time_s)])

    def to_text(self) -> str:
        agg = self.aggregates()
        name_w = max([len(m) for m in agg] + [6])
        lines = [f"{'method':<{name_w}}  {'PSNR(dB)':>9}  {'SSIM':>7}  "
                 f"{'time(s)':>8}  notes"]
        for m, a in agg.items():
            p = f"{a['mean_psnr_db']:.2f}" if a["mean_psnr_db"] is not None else "-"
            s = f"{a['mean_ssim']:.4f}" if a["mean_ssim"] is not None else "-"
            t = f"{a['mean_time_s']:.3f}" if a["mean_time_s"] is not None else "-"
            notes = []
            if a["flagged_identical"]:
                notes.append(f"{a['flagged_identical']} identical")
            if a["failed"]:
                notes.append(f"{a['failed']} failed")
            lines.append(f"{m:<{name_w}}  {p:>9}  {s:>7}  {t:>8}  "
                         f"{', '.join(notes)}")
        return "\n".join(lines) + "\n"


def evaluate_report(pairs, methods: dict, roi: np.ndarray = None,
                    ssim_config: SsimConfig = None) -> MetricsReport:
    """Run every method on every noisy image; time it, score vs clean.

    `methods` maps name -> callable(noisy image) -> filtered image.  A
    method failure is recorded on its row; remaining rows still run.
    """
    if not pairs:
        raise ValueError("no (noisy, clean) pairs to evaluate")
    report = MetricsReport()
    for i, (noisy, clean) in enumerate(pairs):
        for name, fn in methods.items():
            row = ReportRow(image_id=f"img{i:03d}", method=name)
            try:
                t0 = time.perf_counter()
                out = fn(noisy)
                row.time_s = time.perf_counter() - t0
                row.psnr_db = psnr(out, clean, roi=roi)
                row.ssim = ssim(out, clean, ssim_config)
            except Exception as e:  # noqa: BLE001 - per-row failure contract
                row.error = f"{type(e).__name__}: {e}"
            report.rows.append(row)
    return report
