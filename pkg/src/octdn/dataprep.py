"""Ground truth by register-then-average, synthetic speckle, image I/O.

Clean references for training come from repeated scans of the same anatomy:
candidate B-scans from the other volumes are affinely registered to the
target scan, ranked by SSIM, and the best L are averaged together with the
target.  For desk-scale verification a seeded multiplicative gamma speckle
model and a layered-phantom generator stand in for scanner data.

Images are 2-D float64 arrays in [0,1].  A volume is a directory of
zero-padded numerically named slice files (PGM P5 or TNS1).  Affine
transforms are 2x3 matrices [[a, b, tx], [c, d, ty]] mapping *output*
coordinates to input coordinates with x = column, y = row:
sample_x = a*x + b*y + tx, sample_y = c*x + d*y + ty.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import (BadMagicError, DataFormatError, DegenerateInputError,
                     ShapeError, TruncatedFileError, UnsupportedFormatError)
from .tensor import load_tns, save_tns

_SINGULARITY_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# affine transforms

@dataclass
class AffineTransform:
    matrix: np.ndarray  # 2x3: [[a, b, tx], [c, d, ty]]

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ShapeError(f"affine matrix must be 2x3, got {m.shape}")
        self.matrix = m

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]))

    @classmethod
    def rotation_about(cls, degrees: float, cx: float, cy: float
                       ) -> "AffineTransform":
        """Rotation about (cx, cy); output coords are rotated by -degrees
        when sampling, which rotates the image content by +degrees."""
        r = np.deg2rad(degrees)
        ca, sa = np.cos(r), np.sin(r)
        a, b, c, d = ca, sa, -sa, ca
        tx = cx - a * cx - b * cy
        ty = cy - c * cx - d * cy
        return cls(np.array([[a, b, tx], [c, d, ty]]))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def params(self) -> np.ndarray:
        """Flat [a, b, tx, c, d, ty]."""
        return self.matrix.reshape(-1).copy()

    def det(self) -> float:
        m = self.matrix
        return float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])


def warp_affine(img: np.ndarray, t: AffineTransform) -> np.ndarray:
    """Bilinear resampling; samples falling outside the image read as 0."""
    if abs(t.det()) <= _SINGULARITY_FLOOR:
        raise DegenerateInputError(f"singular transform, det={t.det():.3g}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    m = t.matrix
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros((h, w))
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            out += np.where(inb, vals, 0.0) * wgt
    return out


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2 * 2, w // 2 * 2
    v = img[:h2, :w2]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def _center_params_to_transform(u, h, w) -> AffineTransform:
    """u = [da, db, tx, dc, dd, ty] around the image center, in pixels for
    the translations and edge-pixels for the linear offsets."""
    s = 2.0 / max(h, w)
    A = np.array([[1.0 + u[0] * s, u[1] * s], [u[3] * s, 1.0 + u[4] * s]])
    ctr = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    t = ctr - A @ ctr + np.array([u[2], u[5]])
    return AffineTransform(np.array([[A[0, 0], A[0, 1], t[0]],
                                     [A[1, 0], A[1, 1], t[1]]]))


def _transform_to_center_params(t: AffineTransform, h, w) -> np.ndarray:
    s = 2.0 / max(h, w)
    A = t.linear
    ctr = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    trans = t.matrix[:, 2] - ctr + A @ ctr
    return np.array([(A[0, 0] - 1.0) / s, A[0, 1] / s, trans[0],
                     A[1, 0] / s, (A[1, 1] - 1.0) / s, trans[1]])


def _compose(t1: AffineTransform, t2: AffineTransform) -> AffineTransform:
    """Transform applying t2 first when mapping output to input coords:
    result(x) = t1(t2(x))."""
    a1 = np.vstack([t1.matrix, [0, 0, 1]])
    a2 = np.vstack([t2.matrix, [0, 0, 1]])
    return AffineTransform((a1 @ a2)[:2, :])


_REGISTER_MAX_ITER = 200
_REGISTER_STEP_TOL = 1e-5
_REGISTER_FD = 0.05


def register_affine(moving: np.ndarray, fixed: np.ndarray,
                    levels: int = 3) -> tuple:
    """Find the affine transform t minimizing MSE(warp(moving, t), fixed).

    Coarse-to-fine over a factor-2 pyramid; plain gradient descent on 6
    center-based parameters with centrally differenced gradients and a
    backtracking line search.  Deterministic.  Returns (transform, mse).
    """
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if moving.shape != fixed.shape:
        raise ShapeError(
            f"dimension mismatch: {moving.shape} vs {fixed.shape}")
    if np.ptp(moving) == 0.0 or np.ptp(fixed) == 0.0:
        raise DegenerateInputError("cannot register a constant image")

    pyramid = [(moving, fixed)]
    for _ in range(levels - 1):
        mv, fx = pyramid[-1]
        if min(mv.shape) < 16:
            break
        pyramid.append((_downsample2(mv), _downsample2(fx)))

    u = np.zeros(6)
    for li, (mv, fx) in enumerate(reversed(pyramid)):
        h, w = fx.shape
        if li > 0:
            # re-express the coarse solution in this level's pixel grid:
            # coarse pixel i sits at fine coordinate 2i + 0.5
            t_prev = _center_params_to_transform(u, *_prev_shape)
            s_up = AffineTransform(np.array([[2.0, 0.0, 0.5],
                                             [0.0, 2.0, 0.5]]))
            s_dn = AffineTransform(np.array([[0.5, 0.0, -0.25],
                                             [0.0, 0.5, -0.25]]))
            t_fine = _compose(s_up, _compose(t_prev, s_dn))
            u = _transform_to_center_params(t_fine, h, w)
        _prev_shape = (h, w)

        def cost(uv):
            t = _center_params_to_transform(uv, h, w)
            if abs(t.det()) <= _SINGULARITY_FLOOR:
                return np.inf
            d = warp_affine(mv, t) - fx
            return float(np.mean(d * d))

        f0 = cost(u)
        for _ in range(_REGISTER_MAX_ITER):
            grad = np.empty(6)
            for i in range(6):
                up = u.copy(); up[i] += _REGISTER_FD
                um = u.copy(); um[i] -= _REGISTER_FD
                grad[i] = (cost(up) - cost(um)) / (2.0 * _REGISTER_FD)
            gn = float(np.linalg.norm(grad))
            if gn == 0.0 or not np.isfinite(gn):
                break
            direction = grad / gn
            step = 1.0
            improved = False
            for _ in range(25):
                cand = u - step * direction
                fc = cost(cand)
                if fc < f0:
                    improved = True
                    break
                step *= 0.5
            if not improved:
                break
            t_old = _center_params_to_transform(u, h, w)
            u, f0 = cand, fc
            t_new = _center_params_to_transform(u, h, w)
            if np.max(np.abs(t_new.params - t_old.params)) < _REGISTER_STEP_TOL:
                break

    h, w = moving.shape
    t_final = _center_params_to_transform(u, h, w)
    final = warp_affine(moving, t_final) - fixed
    return t_final, float(np.mean(final * final))


# ---------------------------------------------------------------------------
# ground truth by averaging

@dataclass
class GroundTruthConfig:
    M: int = 20   # volumes in the stack
    N: int = 7    # nearby B-scans taken from each other volume
    L: int = 10   # best-SSIM candidates averaged with the target scan

    def __post_init__(self):
        if self.M < 2 or self.N < 1:
            raise ValueError(f"need M >= 2 and N >= 1, got M={self.M} N={self.N}")
        if self.L < 1 or self.L > self.N * (self.M - 1):
            raise ValueError(
                f"L must lie in [1, N*(M-1)] = [1, {self.N * (self.M - 1)}], "
                f"got {self.L}")


def nearby_indices(center: int, n: int, total: int) -> list:
    """The n scan indices nearest to `center`: a window of exactly n,
    shifted inward at the volume boundaries."""
    if n > total:
        raise ValueError(f"volume holds {total} scans, need {n}")
    start = min(max(center - n // 2, 0), total - n)
    return list(range(start, start + n))


def build_ground_truth(volumes: list, target_index: int,
                       config: GroundTruthConfig, crop=None) -> list:
    """Average the best-aligned candidate scans into a clean reference.

    For every B-scan b of the target volume: take the N nearest-index scans
    from each of the other M-1 volumes, register each to b, score by SSIM,
    keep the top L (ties broken by lower volume index, then lower scan
    index), and average them together with b itself (L+1 images).  Returns
    (noisy, clean) pairs in scan order.  `crop` = (y0, y1, x0, x1) restricts
    all processing to a fixed window.
    """
    from .eval import ssim

    if len(volumes) < 2:
        raise ValueError(f"need >= 2 volumes, got {len(volumes)}")
    if len(volumes) != config.M:
        raise ValueError(
            f"config infeasible: M={config.M} but {len(volumes)} volumes supplied")
    if not 0 <= target_index < len(volumes):
        raise ValueError(f"target index {target_index} out of range")
    shapes = {img.shape for vol in volumes for img in vol}
    counts = {len(vol) for vol in volumes}
    if len(shapes) != 1 or len(counts) != 1:
        raise ShapeError(
            f"volumes must share geometry, got dims {shapes}, counts {counts}")
    if crop is not None:
        y0, y1, x0, x1 = crop
        volumes = [[img[y0:y1, x0:x1] for img in vol] for vol in volumes]

    target_vol = volumes[target_index]
    nscans = len(target_vol)
    pairs = []
    for b in range(nscans):
        target = np.asarray(target_vol[b], dtype=np.float64)
        candidates = []
        for vi, vol in enumerate(volumes):
            if vi == target_index:
                continue
            for si in nearby_indices(b, config.N, nscans):
                t, _ = register_affine(np.asarray(vol[si], dtype=np.float64),
                                       target)
                reg = warp_affine(vol[si], t)
                score = ssim(reg, target)
                candidates.append((score, vi, si, reg))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        chosen = candidates[:config.L]
        acc = target.copy()
        for _, _, _, reg in chosen:
            acc += reg
        clean = acc / (len(chosen) + 1)
        pairs.append((target.copy(), clean))
    return pairs


# ---------------------------------------------------------------------------
# synthetic speckle and phantoms

@dataclass
class SpeckleConfig:
    looks: float = 4.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.looks <= 0:
            raise ValueError(f"looks must be > 0, got {self.looks}")


def speckle_field(shape, looks: float, rng) -> np.ndarray:
    """Unit-mean gamma multipliers: shape parameter `looks`, variance
    1/looks."""
    return rng.gamma(looks, 1.0 / looks, size=shape)


def add_speckle(clean: np.ndarray, config: SpeckleConfig,
                rng=None) -> np.ndarray:
    """Multiply by a seeded unit-mean gamma field and clamp to [0,1].

    Pass an explicit rng to draw several images from one stream; otherwise
    the config seed starts a fresh stream (bit-reproducible)."""
    clean = np.asarray(clean, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    return np.clip(clean * speckle_field(clean.shape, config.looks, rng),
                   0.0, 1.0)


def make_phantom(height: int, width: int, rng) -> np.ndarray:
    """Layered retina-like phantom: background gradient, banded layers with
    smooth intensity profiles and fine texture, thin bright membranes, and
    elliptical inclusions.  Values in [0, 0.95]."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    xn = xx / width
    img = 0.05 + 0.05 * (yy / height)

    top = height * 0.22 + height * 0.08 * np.sin(
        2 * np.pi * xn * rng.uniform(0.5, 1.5) + rng.uniform(0, 2 * np.pi))
    thick = height * rng.uniform(0.38, 0.52)
    n_layers = int(rng.integers(4, 8))
    bounds = np.sort(rng.uniform(0, 1, n_layers - 1)) * thick
    bounds = np.concatenate([[0.0], bounds, [thick]])
    intens = rng.uniform(0.25, 0.75, n_layers)
    prof = 0.8 + 0.2 * np.sin(2 * np.pi * xn * rng.uniform(0.3, 1.0)
                              + rng.uniform(0, 2 * np.pi))
    for i in range(n_layers):
        lo = top + bounds[i]
        hi = top + bounds[i + 1]
        band = 0.5 * (np.tanh((yy - lo) / 1.5) - np.tanh((yy - hi) / 1.5))
        tex = 1.0 + 0.15 \
            * np.sin(2 * np.pi * xx / rng.uniform(5, 9) + rng.uniform(0, 2 * np.pi)) \
            * np.sin(2 * np.pi * yy / rng.uniform(5, 9) + rng.uniform(0, 2 * np.pi))
        img += band * intens[i] * prof * tex

    # membranes 1-2 px thick: structure a denoiser must not blur away
    for _ in range(int(rng.integers(2, 4))):
        cy = top + thick * rng.uniform(0.05, 0.95)
        path = cy + height * 0.03 * np.sin(
            2 * np.pi * xn * rng.uniform(0.5, 2.0) + rng.uniform(0, 2 * np.pi))
        width_px = rng.uniform(0.6, 1.2)
        img += np.exp(-0.5 * ((yy - path) / width_px) ** 2) * rng.uniform(0.2, 0.35)

    for _ in range(int(rng.integers(2, 5))):
        cy = rng.uniform(0.25, 0.85) * height
        cx = rng.uniform(0.1, 0.9) * width
        ry = rng.uniform(3, 12)
        rx = rng.uniform(5, 18)
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        img += 0.5 * (1 - np.tanh((d - 1) * 3)) * rng.uniform(-0.2, 0.3)

    return np.clip(img, 0.0, 0.95)


# ---------------------------------------------------------------------------
# image and volume I/O

def _read_pgm_token(data: bytes, pos: int):
    """Skip whitespace/comments, return (token, new position)."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise TruncatedFileError("PGM header cut short")
    return data[start:pos], pos


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"P2":
        raise UnsupportedFormatError(f"{path}: ASCII PGM (P2) not supported")
    if raw[:2] != b"P5":
        raise BadMagicError(f"{path}: not a binary PGM (P5) file")
    pos = 2
    try:
        wtok, pos = _read_pgm_token(raw, pos)
        htok, pos = _read_pgm_token(raw, pos)
        mtok, pos = _read_pgm_token(raw, pos)
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except (ValueError, TruncatedFileError) as e:
        raise DataFormatError(f"{path}: malformed PGM header: {e}") from None
    if w < 1 or h < 1:
        raise DataFormatError(f"{path}: bad dimensions {w}x{h}")
    if w * h > 10 ** 9:
        raise DataFormatError(f"{path}: dimension overflow {w}x{h}")
    if not 0 < maxval < 65536:
        raise DataFormatError(f"{path}: bad maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    bpp = 1 if maxval < 256 else 2
    need = w * h * bpp
    pixels = raw[pos:pos + need]
    if len(pixels) < need:
        raise TruncatedFileError(
            f"{path}: expected {need} pixel bytes, got {len(pixels)}")
    dt = np.uint8 if bpp == 1 else np.dtype(">u2")
    img = np.frombuffer(pixels, dtype=dt).reshape(h, w)
    return img.astype(np.float64) / maxval


def write_pgm(img: np.ndarray, path, maxval: int = 255) -> None:
    if maxval not in (255, 65535):
        raise ValueError(f"maxval must be 255 or 65535, got {maxval}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"expected 2-D image, got shape {img.shape}")
    q = np.clip(np.rint(img * maxval), 0, maxval)
    data = q.astype(np.uint8 if maxval == 255 else np.dtype(">u2")).tobytes()
    h, w = img.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(header + data)
    os.replace(tmp, path)


def read_image(path) -> np.ndarray:
    """Read a [0,1] grayscale image; format chosen by extension
    (.pgm -> binary PGM, .tns -> raw tensor)."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        return read_pgm(path)
    if ext == ".tns":
        t = load_tns(path)
        if t.shape[0] != 1 or t.shape[1] != 1:
            raise DataFormatError(
                f"{path}: expected a 1x1xHxW tensor image, got {t.shape}")
        return np.clip(t[0, 0], 0.0, 1.0)
    raise UnsupportedFormatError(f"{path}: unknown image extension {ext!r}")


def write_image(img: np.ndarray, path, maxval: int = 65535) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        write_pgm(img, path, maxval=maxval)
    elif ext == ".tns":
        save_tns(np.asarray(img, dtype=np.float64)[None, None, :, :], path)
    else:
        raise UnsupportedFormatError(f"{path}: unknown image extension {ext!r}")


_SLICE_RE = re.compile(r"^(\d+)\.(pgm|tns)$")


def load_volume(directory) -> list:
    """Read an ordered B-scan stack from numerically named slice files."""
    entries = []
    for name in os.listdir(directory):
        m = _SLICE_RE.match(name)
        if m:
            entries.append((int(m.group(1)), name))
    if not entries:
        raise DataFormatError(f"{directory}: no numbered .pgm/.tns slices")
    entries.sort()
    slices = [read_image(os.path.join(directory, name)) for _, name in entries]
    dims = {s.shape for s in slices}
    if len(dims) != 1:
        raise ShapeError(f"{directory}: slices disagree on dims: {dims}")
    return slices


def save_volume(slices, directory, ext: str = "pgm",
                maxval: int = 65535) -> None:
    os.makedirs(directory, exist_ok=True)
    width = max(4, len(str(len(slices) - 1)))
    for i, img in enumerate(slices):
        write_image(img, os.path.join(directory, f"{i:0{width}d}.{ext}"),
                    maxval=maxval)
