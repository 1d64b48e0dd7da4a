"""Dense 4-D tensors and the primitives the network layers build on.

A tensor is a C-contiguous numpy array of shape (n, c, h, w): batch,
channels, height, width.  Row-major NCHW indexing means entry (b, ch, y, x)
lives at flat offset ((b*c + ch)*h + y)*w + x.  float64 is the reference
precision; float32 is accepted as a fast storage mode, but gradient checking
always runs in float64.

Tensors are treated as immutable once constructed; operations here return
new arrays.  The on-disk debug format is TNS1: magic b"TNS1", four u64
little-endian extents, then the data as little-endian float64.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import BadMagicError, ShapeError, TruncatedFileError

TNS_MAGIC = b"TNS1"

_ALLOWED_DTYPES = (np.float64, np.float32)


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Coerce to a validated 4-D C-contiguous tensor."""
    t = np.ascontiguousarray(data, dtype=dtype)
    validate(t)
    return t


def validate(t: np.ndarray) -> np.ndarray:
    if t.ndim != 4:
        raise ShapeError(f"tensor must be 4-D (n,c,h,w), got shape {t.shape}")
    if any(e < 1 for e in t.shape):
        raise ShapeError(f"all extents must be >= 1, got {t.shape}")
    if t.dtype.type not in _ALLOWED_DTYPES:
        raise ShapeError(f"dtype must be float64 or float32, got {t.dtype}")
    if not t.flags.c_contiguous:
        raise ShapeError("tensor data must be C-contiguous row-major")
    return t


def zeros_like(t: np.ndarray) -> np.ndarray:
    return np.zeros_like(t)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum; operands must agree in every extent."""
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a + b


def pad_zero(t: np.ndarray, p: int) -> np.ndarray:
    """Surround every h x w map with a zero ring of width p."""
    if p < 0:
        raise ValueError(f"pad width must be >= 0, got {p}")
    if p == 0:
        return t.copy()
    n, c, h, w = t.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=t.dtype)
    out[:, :, p:p + h, p:p + w] = t
    return out


def center_crop(t: np.ndarray, p: int) -> np.ndarray:
    """Inverse of pad_zero: drop a ring of width p."""
    if p == 0:
        return t.copy()
    n, c, h, w = t.shape
    if h <= 2 * p or w <= 2 * p:
        raise ShapeError(f"cannot crop {p} from spatial dims {(h, w)}")
    return t[:, :, p:h - p, p:w - p].copy()


def channel_stats(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance over (batch, y, x).

    Two-pass evaluation in float64 so a constant channel reports variance
    exactly 0 regardless of magnitude.
    """
    validate(t)
    x = t.astype(np.float64, copy=False)
    mean = x.mean(axis=(0, 2, 3))
    var = np.mean((x - mean[None, :, None, None]) ** 2, axis=(0, 2, 3))
    return mean, var


def save_tns(t: np.ndarray, path) -> None:
    validate(t)
    payload = TNS_MAGIC + struct.pack("<4Q", *t.shape)
    payload += t.astype("<f8", copy=False).tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def load_tns(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != TNS_MAGIC:
        raise BadMagicError(f"{path}: not a TNS1 file")
    if len(raw) < 4 + 32:
        raise TruncatedFileError(f"{path}: header cut short")
    dims = struct.unpack("<4Q", raw[4:36])
    if any(d < 1 for d in dims):
        raise ShapeError(f"{path}: invalid extents {dims}")
    count = 1
    for d in dims:
        count *= d
    need = 36 + 8 * count
    if len(raw) < need:
        raise TruncatedFileError(
            f"{path}: expected {need} bytes for dims {dims}, got {len(raw)}")
    data = np.frombuffer(raw[36:need], dtype="<f8").astype(np.float64)
    return data.reshape(dims)
