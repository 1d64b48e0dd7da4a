"""Differentiable layers: 3x3 same-padding convolution, batch norm, ReLU.

Public functional ops (`conv2d`, `batchnorm2d`, `relu`) take NCHW float64
tensors and mirror the layer contracts one-to-one.  The layer classes used
by the network keep their feature maps channels-last internally: with 64
channels the innermost run is 256 contiguous bytes, which makes the patch
matrix ("im2col") expansion a handful of big slice copies instead of a
scatter, and lets one BLAS matmul do the whole convolution.  A direct
quadruple-loop convolution is kept as the test oracle; both paths must agree
to 1e-10.

Precision: float64 is the reference. Layers can be built float32 for speed;
forward results must then agree with float64 to a relative 1e-4.  Gradient
checking always runs float64.

ReLU uses subgradient 0 at exactly 0, so gradient checks are deterministic.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateStatisticsError, ShapeError


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


BN_EPS = 1e-5
BN_MOMENTUM = 0.9
HE_FAN_IN_GAIN = 2.0


# ---------------------------------------------------------------------------
# parameter records (canonical NCHW-style layout, float64)

@dataclass
class ConvParams:
    """weights shaped (out_ch, in_ch, s, s); bias per output channel."""
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv weights must be (out,in,s,s), got {w.shape}")
        if w.shape[2] % 2 != 1:
            raise ShapeError(f"kernel side must be odd, got {w.shape[2]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("conv weights must be finite")
        self.weights = w
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(w.shape[0])


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        c = np.asarray(self.gamma).size
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name,
                    np.asarray(getattr(self, name), dtype=np.float64).reshape(c))
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be >= 0 per channel")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")


def nchw_to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(x, (0, 2, 3, 1)))


def nhwc_to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(x, (0, 3, 1, 2)))


# ---------------------------------------------------------------------------
# scratch buffers: the big im2col matrices are reused across layer calls

_scratch_pool: dict = {}


def _scratch(shape, dtype):
    key = (shape, np.dtype(dtype).str)
    buf = _scratch_pool.get(key)
    if buf is None:
        if len(_scratch_pool) >= 8:
            _scratch_pool.clear()
        buf = np.empty(shape, dtype)
        _scratch_pool[key] = buf
    return buf


def clear_scratch():
    _scratch_pool.clear()


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Expand (n,h,w,c) into the patch matrix (n*h*w, k*k*c), zero padded.

    Row (b,y,x) holds the k x k neighborhood of that pixel, channels
    innermost.  The returned array is a pooled scratch buffer: consume it
    before the next im2col call of the same shape.
    """
    n, h, w, c = x.shape
    p = k // 2
    xp = _scratch((n, h + 2 * p, w + 2 * p, c), x.dtype)
    xp[:] = 0.0
    xp[:, p:p + h, p:p + w, :] = x
    cols = _scratch((n * h * w, k * k * c), x.dtype)
    c6 = cols.reshape(n, h, w, k, k, c)
    for ky in range(k):
        for kx in range(k):
            c6[:, :, :, ky, kx, :] = xp[:, ky:ky + h, kx:kx + w, :]
    return cols


# ---------------------------------------------------------------------------
# layers (channels-last internals)

class Conv2d:
    """3x3 (any odd k) stride-1 convolution with zero same-padding."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, rng=None,
                 dtype=np.float64, weight_scale: float = 1.0):
        if kernel % 2 != 1:
            raise ShapeError(f"kernel side must be odd, got {kernel}")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        std = weight_scale * np.sqrt(HE_FAN_IN_GAIN / (in_ch * kernel * kernel))
        if rng is None:
            w = np.zeros((kernel, kernel, in_ch, out_ch))
        else:
            w = rng.standard_normal((kernel, kernel, in_ch, out_ch)) * std
        self.w = w.astype(dtype)                  # (k,k,in,out)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.gw = None
        self.gb = None
        self._x = None

    @classmethod
    def from_params(cls, params: ConvParams, dtype=np.float64) -> "Conv2d":
        out_ch, in_ch, s, _ = params.weights.shape
        layer = cls(in_ch, out_ch, kernel=s, dtype=dtype)
        layer.w = np.ascontiguousarray(
            params.weights.transpose(2, 3, 1, 0), dtype=dtype)
        layer.b = params.bias.astype(dtype)
        return layer

    def to_params(self) -> ConvParams:
        return ConvParams(
            weights=np.ascontiguousarray(self.w.transpose(3, 2, 0, 1),
                                         dtype=np.float64),
            bias=self.b.astype(np.float64))

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        n, h, w, c = x.shape
        if c != self.in_ch:
            raise ShapeError(
                f"conv expects {self.in_ch} input channels, got shape {x.shape}")
        if mode is Mode.TRAIN:
            self._x = x
        cols = im2col(x, self.kernel)
        out = np.empty((n * h * w, self.out_ch), dtype=x.dtype)
        np.matmul(cols, self.w.reshape(-1, self.out_ch), out=out)
        out += self.b
        return out.reshape(n, h, w, self.out_ch)

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called without a cached training forward")
        n, h, w, co = g.shape
        k = self.kernel
        g2 = g.reshape(-1, co)
        self.gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        # One patch matrix serves both gradients: against the input it gives
        # the (tap-flipped) weight gradient, against the flipped transposed
        # weights it gives the input gradient.
        cols_g = im2col(g, k)
        x2 = self._x.reshape(-1, self.in_ch)
        corr = (cols_g.T @ x2).reshape(k, k, co, self.in_ch)
        self.gw = np.ascontiguousarray(corr[::-1, ::-1].transpose(0, 1, 3, 2))
        wt = self.w[::-1, ::-1].transpose(0, 1, 3, 2)  # (k,k,out,in)
        gx = np.empty((n * h * w, self.in_ch), dtype=g.dtype)
        np.matmul(cols_g, np.ascontiguousarray(wt).reshape(-1, self.in_ch),
                  out=gx)
        return gx.reshape(n, h, w, self.in_ch)

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.gw, self.gb]


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes by batch mean / population variance and blends the
    running stats as running = momentum*running + (1-momentum)*batch.  Infer
    mode applies the stored stats and mutates nothing.
    """

    def __init__(self, channels: int, eps: float = BN_EPS,
                 momentum: float = BN_MOMENTUM, dtype=np.float64):
        self.channels = channels
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.ggamma = None
        self.gbeta = None
        self._xh = None
        self._inv = None

    @classmethod
    def from_params(cls, params: BNParams, dtype=np.float64) -> "BatchNorm2d":
        layer = cls(params.gamma.size, eps=params.eps,
                    momentum=params.momentum, dtype=dtype)
        layer.gamma = params.gamma.astype(dtype)
        layer.beta = params.beta.astype(dtype)
        layer.running_mean = params.running_mean.astype(np.float64)
        layer.running_var = params.running_var.astype(np.float64)
        return layer

    def to_params(self) -> BNParams:
        return BNParams(gamma=self.gamma.astype(np.float64),
                        beta=self.beta.astype(np.float64),
                        running_mean=self.running_mean.copy(),
                        running_var=self.running_var.copy(),
                        eps=self.eps, momentum=self.momentum)

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        n, h, w, c = x.shape
        if c != self.channels:
            raise ShapeError(
                f"batchnorm expects {self.channels} channels, got shape {x.shape}")
        if mode is Mode.TRAIN:
            m = n * h * w
            if m < 2:
                raise DegenerateStatisticsError(
                    f"need >= 2 samples per channel to normalize, got {m}")
            x2 = x.reshape(m, c)
            s1 = x2.sum(axis=0, dtype=np.float64)
            s2 = np.einsum("ij,ij->j", x2, x2, dtype=np.float64)
            mean = s1 / m
            var = np.maximum(s2 / m - mean * mean, 0.0)  # population variance
            self.running_mean *= self.momentum
            self.running_mean += (1.0 - self.momentum) * mean
            self.running_var *= self.momentum
            self.running_var += (1.0 - self.momentum) * var
            inv = 1.0 / np.sqrt(var + self.eps)
            xh = np.empty_like(x)
            np.subtract(x, mean.astype(x.dtype), out=xh)
            xh *= inv.astype(x.dtype)
            self._xh, self._inv = xh, inv
            out = np.multiply(xh, self.gamma)
            out += self.beta
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = (self.gamma * inv).astype(x.dtype)
        shift = (self.beta - self.gamma * inv * self.running_mean).astype(x.dtype)
        out = np.multiply(x, scale)
        out += shift
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._xh is None:
            raise RuntimeError("backward called without a cached training forward")
        n, h, w, c = g.shape
        m = n * h * w
        g2 = g.reshape(m, c)
        xh2 = self._xh.reshape(m, c)
        gbeta = g2.sum(axis=0, dtype=np.float64)
        ggamma = np.einsum("ij,ij->j", g2, xh2, dtype=np.float64)
        self.gbeta = gbeta.astype(g.dtype)
        self.ggamma = ggamma.astype(g.dtype)
        coef = (self.gamma.astype(np.float64) * self._inv).astype(g.dtype)
        gx = np.multiply(self._xh, (-(ggamma / m)).astype(g.dtype))
        gx += g
        gx -= (gbeta / m).astype(g.dtype)
        gx *= coef
        return gx

    def params(self):
        return [self.gamma, self.beta]

    def grads(self):
        return [self.ggamma, self.gbeta]


class ReLU:
    """max(0, x); backward passes gradient only where the input was > 0."""

    def __init__(self, inplace: bool = False):
        # inplace is safe only when the caller guarantees the input buffer
        # is not read again (the network blocks do)
        self.inplace = inplace
        self._mask = None

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        out = np.maximum(x, 0, out=x) if self.inplace else np.maximum(x, 0)
        if mode is Mode.TRAIN:
            self._mask = out > 0
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise RuntimeError("backward called without a cached training forward")
        return g * self._mask

    def params(self):
        return []

    def grads(self):
        return []


# ---------------------------------------------------------------------------
# public NCHW functional ops (reference precision)

def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Same-size 3x3 convolution of an NCHW float tensor."""
    if x.shape[1] != params.weights.shape[1]:
        raise ShapeError(
            f"input channels {x.shape[1]} != kernel in-channels "
            f"{params.weights.shape[1]}")
    layer = Conv2d.from_params(params, dtype=np.float64)
    out = layer.forward(nchw_to_nhwc(x.astype(np.float64)), Mode.INFER)
    return nhwc_to_nchw(out)


def conv2d_direct(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Quadruple-loop convolution oracle; slow, for verification only."""
    if x.shape[1] != params.weights.shape[1]:
        raise ShapeError(
            f"input channels {x.shape[1]} != kernel in-channels "
            f"{params.weights.shape[1]}")
    w, bias = params.weights, params.bias
    out_ch, in_ch, k, _ = w.shape
    n, c, h, wd = x.shape
    p = k // 2
    xp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    xp[:, :, p:p + h, p:p + wd] = x
    out = np.empty((n, out_ch, h, wd))
    for b in range(n):
        for o in range(out_ch):
            acc = np.full((h, wd), bias[o])
            for ci in range(in_ch):
                for ky in range(k):
                    for kx in range(k):
                        acc += w[o, ci, ky, kx] * xp[b, ci, ky:ky + h, kx:kx + wd]
            out[b, o] = acc
    return out


def batchnorm2d(x: np.ndarray, params: BNParams, mode: Mode) -> np.ndarray:
    """Batch normalization on an NCHW tensor; Train mode updates the running
    statistics stored in `params`."""
    layer = BatchNorm2d.from_params(params, dtype=np.float64)
    out = layer.forward(nchw_to_nhwc(x.astype(np.float64)), mode)
    if mode is Mode.TRAIN:
        params.running_mean[:] = layer.running_mean
        params.running_var[:] = layer.running_var
    return nhwc_to_nchw(out)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    worst: str = ""
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_err <= self.tolerance

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        msg = f"grad_check {state}: max rel err {self.max_rel_err:.3e}" \
              f" (tol {self.tolerance:.1e}) at {self.worst or 'n/a'}"
        if self.failures:
            msg += "; " + "; ".join(self.failures[:5])
        return msg


def grad_check_scalar(loss_fn, variables, grads_fn, tolerance: float = 1e-4,
                      step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of a scalar loss against central finite
    differences, entry by entry.

    variables: list of (name, float64 array); each array is perturbed in
    place and restored.  loss_fn() re-evaluates the loss from the current
    array contents; grads_fn() returns analytic gradients aligned with
    `variables`.  Relative error is |a-n| / max(1, |a|, |n|).
    """
    analytic = [np.array(a, dtype=np.float64, copy=True) for a in grads_fn()]
    report = GradCheckReport(max_rel_err=0.0, tolerance=tolerance)
    for (name, arr), ga in zip(variables, analytic):
        if arr.dtype != np.float64:
            raise ValueError(f"{name}: gradient checking requires float64")
        if ga.shape != arr.shape:
            raise ShapeError(
                f"{name}: analytic gradient shape {ga.shape} != {arr.shape}")
        flat = arr.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            v0 = flat[i]
            flat[i] = v0 + step
            lp = loss_fn()
            flat[i] = v0 - step
            lm = loss_fn()
            flat[i] = v0
            num = (lp - lm) / (2.0 * step)
            a = gflat[i]
            idx = tuple(int(j) for j in np.unravel_index(i, arr.shape))
            where = f"{name}[{idx}]"
            if not (np.isfinite(a) and np.isfinite(num)):
                report.failures.append(f"non-finite gradient at {where}")
                continue
            rel = abs(a - num) / max(1.0, abs(a), abs(num))
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = where
    return report


def grad_check(op, x: np.ndarray, tolerance: float = 1e-4,
               mode: Mode = Mode.TRAIN, step: float = 1e-5) -> GradCheckReport:
    """Gradient-check a layer-like op (forward/backward/params/grads) with a
    sum-of-squares loss over its output, including the input tensor."""
    if x.dtype != np.float64:
        raise ValueError("gradient checking requires float64 inputs")
    variables = [("input", x)]
    variables += [(f"param{i}", p) for i, p in enumerate(op.params())]

    def loss_fn():
        out = op.forward(x, mode)
        return float(np.sum(out * out))

    def grads_fn():
        out = op.forward(x, mode)
        gx = op.backward(2.0 * out)
        return [gx] + list(op.grads())

    return grad_check_scalar(loss_fn, variables, grads_fn,
                             tolerance=tolerance, step=step)
