"""The denoising network: CBN / Branch / Residual blocks, audit, checkpoints.

Block stack (fixed default): CBN, CBN, Branch, Res, Res, Res, CBN, CBN, then
a plain 3x3 output convolution back to image channels.  CBN is
conv -> batchnorm -> ReLU.  Branch sums a CBN path with two plain stacked
convolutions.  Res is relu(x + F(x)) with F = conv -> BN -> ReLU -> conv -> BN.

Depth bookkeeping counts convolution stages along the longest path through
the hidden stack (CBN 1, Branch 2, Res 2): the default adds up to 12.  The
output projection is a readout on top of that stack and is not a counted
stage; with it the network holds 14 convolutions total.  The projection
carries no BN or ReLU so predicted noise values may be negative, and its
weights start at 1/100 of the usual scale so an untrained network is close
to the identity denoiser.

Checkpoint file: magic "OCTD", u32 LE format version, u32 LE descriptor
length, JSON descriptor (architecture + training metadata), all parameters
in block order as little-endian float64, trailing CRC-32 (u32 LE) of every
preceding byte.  Saves are write-temp-then-rename, so a crash never leaves
a partial checkpoint behind.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagicError, ChecksumMismatchError, DataFormatError,
                     OctdnError, ShapeError, TruncatedFileError,
                     VersionMismatchError)
from .nn import (BatchNorm2d, BNParams, Conv2d, ConvParams, Mode, ReLU,
                 batchnorm2d, conv2d, nchw_to_nhwc, nhwc_to_nchw, relu)

CHECKPOINT_MAGIC = b"OCTD"
CHECKPOINT_VERSION = 1
HEAD_INIT_SCALE = 0.01

DEFAULT_BLOCKS = ("CBN", "CBN", "Branch", "Res", "Res", "Res", "CBN", "CBN",
                  "OutputConv")

# convolution stages each hidden block contributes to the longest path
_BLOCK_DEPTH = {"CBN": 1, "Branch": 2, "Res": 2}
# total convolutions each block holds
_BLOCK_CONVS = {"CBN": 1, "Branch": 3, "Res": 2, "OutputConv": 1}


class ArchitectureAuditError(OctdnError, AssertionError):
    """Constructed network violates the depth/width contract."""


@dataclass(frozen=True)
class NetworkSpec:
    blocks: tuple = DEFAULT_BLOCKS
    width: int = 64
    kernel: int = 3
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        unknown = [b for b in self.blocks if b not in _BLOCK_CONVS]
        if unknown:
            raise DataFormatError(f"unknown block kinds {unknown}")
        if not self.blocks or self.blocks[-1] != "OutputConv":
            raise DataFormatError("block list must end with OutputConv")
        if self.blocks.count("OutputConv") != 1:
            raise DataFormatError("exactly one OutputConv allowed")
        if self.blocks[0] != "CBN":
            raise DataFormatError("first block must be CBN (channel lift)")
        if self.width < 1 or self.kernel % 2 != 1 or self.in_channels < 1:
            raise DataFormatError(
                f"bad spec: width={self.width} kernel={self.kernel} "
                f"in_channels={self.in_channels}")

    def depth(self) -> int:
        """Longest convolution path through the hidden stack."""
        return sum(_BLOCK_DEPTH[b] for b in self.blocks if b != "OutputConv")

    def conv_count(self) -> int:
        return sum(_BLOCK_CONVS[b] for b in self.blocks)

    def to_json_dict(self) -> dict:
        return {"blocks": list(self.blocks), "width": self.width,
                "kernel": self.kernel, "in_channels": self.in_channels}

    @classmethod
    def from_json_dict(cls, d: dict) -> "NetworkSpec":
        try:
            return cls(blocks=tuple(d["blocks"]), width=int(d["width"]),
                       kernel=int(d["kernel"]), in_channels=int(d["in_channels"]))
        except KeyError as e:
            raise DataFormatError(f"descriptor missing field {e}") from None


@dataclass
class AuditReport:
    depth: int
    conv_count: int
    hidden_filter_counts: tuple
    width: int

    @property
    def uniform(self) -> bool:
        return set(self.hidden_filter_counts) == {self.width}


# ---------------------------------------------------------------------------
# blocks (channels-last engine internals)

class CBNBlock:
    def __init__(self, in_ch, out_ch, kernel, rng, dtype):
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)
        self.relu = ReLU(inplace=True)

    def forward(self, x, mode):
        return self.relu.forward(self.bn.forward(self.conv.forward(x, mode),
                                                 mode), mode)

    def backward(self, g):
        return self.conv.backward(self.bn.backward(self.relu.backward(g)))

    def layers(self):
        return [self.conv, self.bn]

    def hidden_convs(self):
        return [self.conv]

    def params(self):
        return self.conv.params() + self.bn.params()

    def grads(self):
        return self.conv.grads() + self.bn.grads()


class BranchBlock:
    def __init__(self, ch, kernel, rng, dtype):
        self.cbn = CBNBlock(ch, ch, kernel, rng, dtype)
        self.conv_a = Conv2d(ch, ch, kernel, rng, dtype)
        self.conv_b = Conv2d(ch, ch, kernel, rng, dtype)

    def forward(self, x, mode):
        out = self.cbn.forward(x, mode)
        out += self.conv_b.forward(self.conv_a.forward(x, mode), mode)
        return out

    def backward(self, g):
        gx = self.cbn.backward(g)
        gx += self.conv_a.backward(self.conv_b.backward(g))
        return gx

    def layers(self):
        return self.cbn.layers() + [self.conv_a, self.conv_b]

    def hidden_convs(self):
        return [self.cbn.conv, self.conv_a, self.conv_b]

    def params(self):
        return self.cbn.params() + self.conv_a.params() + self.conv_b.params()

    def grads(self):
        return self.cbn.grads() + self.conv_a.grads() + self.conv_b.grads()


class ResBlock:
    def __init__(self, ch, kernel, rng, dtype):
        self.conv1 = Conv2d(ch, ch, kernel, rng, dtype)
        self.bn1 = BatchNorm2d(ch, dtype=dtype)
        self.relu1 = ReLU(inplace=True)
        self.conv2 = Conv2d(ch, ch, kernel, rng, dtype)
        self.bn2 = BatchNorm2d(ch, dtype=dtype)
        self.relu_out = ReLU(inplace=True)

    def forward(self, x, mode):
        f = self.bn2.forward(
            self.conv2.forward(
                self.relu1.forward(
                    self.bn1.forward(self.conv1.forward(x, mode), mode),
                    mode), mode), mode)
        f += x
        return self.relu_out.forward(f, mode)

    def backward(self, g):
        g1 = self.relu_out.backward(g)
        gf = self.conv1.backward(
            self.bn1.backward(
                self.relu1.backward(
                    self.conv2.backward(self.bn2.backward(g1)))))
        gf += g1
        return gf

    def layers(self):
        return [self.conv1, self.bn1, self.conv2, self.bn2]

    def hidden_convs(self):
        return [self.conv1, self.conv2]

    def params(self):
        return (self.conv1.params() + self.bn1.params()
                + self.conv2.params() + self.bn2.params())

    def grads(self):
        return (self.conv1.grads() + self.bn1.grads()
                + self.conv2.grads() + self.bn2.grads())


class OutputConvBlock:
    def __init__(self, in_ch, out_ch, kernel, rng, dtype):
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, dtype,
                           weight_scale=HEAD_INIT_SCALE)

    def forward(self, x, mode):
        return self.conv.forward(x, mode)

    def backward(self, g):
        return self.conv.backward(g)

    def layers(self):
        return [self.conv]

    def hidden_convs(self):
        return []

    def params(self):
        return self.conv.params()

    def grads(self):
        return self.conv.grads()


_BLOCK_CLASSES = {"CBN": CBNBlock, "Branch": BranchBlock, "Res": ResBlock,
                  "OutputConv": OutputConvBlock}


class Network:
    """The full noise-prediction network in its fast channels-last form."""

    def __init__(self, spec: NetworkSpec = None, rng=None,
                 dtype=np.float64):
        """rng None builds zero weights (for loading checkpoints into);
        pass a numpy Generator for fan-in-scaled random initialization."""
        self.spec = spec or NetworkSpec()
        self.dtype = np.dtype(dtype).type
        self.blocks = []
        ch = self.spec.in_channels
        for kind in self.spec.blocks:
            if kind == "CBN":
                blk = CBNBlock(ch, self.spec.width, self.spec.kernel, rng, dtype)
                ch = self.spec.width
            elif kind == "OutputConv":
                blk = OutputConvBlock(ch, self.spec.in_channels,
                                      self.spec.kernel, rng, dtype)
                ch = self.spec.in_channels
            else:
                blk = _BLOCK_CLASSES[kind](ch, self.spec.kernel, rng, dtype)
            self.blocks.append(blk)
        self.audit()

    def audit(self) -> AuditReport:
        """Verify the depth/width contract; raises on violation."""
        hidden = tuple(c.out_ch for b in self.blocks for c in b.hidden_convs())
        report = AuditReport(depth=self.spec.depth(),
                             conv_count=self.spec.conv_count(),
                             hidden_filter_counts=hidden,
                             width=self.spec.width)
        if report.depth != 12:
            raise ArchitectureAuditError(
                f"longest conv path is {report.depth}, contract requires 12")
        if not report.uniform:
            raise ArchitectureAuditError(
                f"hidden filter counts {set(hidden)} != {{{self.spec.width}}}")
        return report

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        for blk in self.blocks:
            x = blk.forward(x, mode)
        return x

    def backward(self, g: np.ndarray) -> np.ndarray:
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        return g

    def params(self):
        out = []
        for blk in self.blocks:
            out += blk.params()
        return out

    def grads(self):
        out = []
        for blk in self.blocks:
            out += blk.grads()
        return out

    # ---- canonical float64 parameter arrays, block order ----
    def param_arrays(self) -> list:
        out = []
        for blk in self.blocks:
            for layer in blk.layers():
                if isinstance(layer, Conv2d):
                    p = layer.to_params()
                    out += [p.weights, p.bias]
                else:
                    p = layer.to_params()
                    out += [p.gamma, p.beta, p.running_mean, p.running_var]
        return out

    def load_param_arrays(self, arrays: list) -> None:
        it = iter(arrays)
        for blk in self.blocks:
            for layer in blk.layers():
                if isinstance(layer, Conv2d):
                    w, b = next(it), next(it)
                    loaded = Conv2d.from_params(ConvParams(w, b), self.dtype)
                    layer.w, layer.b = loaded.w, loaded.b
                else:
                    ga, be, rm, rv = next(it), next(it), next(it), next(it)
                    loaded = BatchNorm2d.from_params(
                        BNParams(ga, be, rm, rv, eps=layer.eps,
                                 momentum=layer.momentum), self.dtype)
                    layer.gamma, layer.beta = loaded.gamma, loaded.beta
                    layer.running_mean = loaded.running_mean
                    layer.running_var = loaded.running_var


# ---------------------------------------------------------------------------
# public NCHW block ops (reference compositions used by tests and docs)

def cbn_forward(x, conv: ConvParams, bn: BNParams, mode: Mode):
    return relu(batchnorm2d(conv2d(x, conv), bn, mode))


def branch_forward(x, cbn_conv: ConvParams, cbn_bn: BNParams,
                   conv_a: ConvParams, conv_b: ConvParams, mode: Mode):
    return (cbn_forward(x, cbn_conv, cbn_bn, mode)
            + conv2d(conv2d(x, conv_a), conv_b))


def res_forward(x, conv1: ConvParams, bn1: BNParams,
                conv2_p: ConvParams, bn2: BNParams, mode: Mode):
    f = batchnorm2d(conv2d(relu(batchnorm2d(conv2d(x, conv1), bn1, mode)),
                           conv2_p), bn2, mode)
    return relu(x + f)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    spec: NetworkSpec
    param_arrays: list
    epoch: int = 0
    seed: int = 0
    loss_history: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_network(cls, net: Network, epoch: int = 0, seed: int = 0,
                     loss_history=None) -> "Checkpoint":
        return cls(spec=net.spec, param_arrays=net.param_arrays(),
                   epoch=epoch, seed=seed,
                   loss_history=list(loss_history or []))

    def to_network(self, dtype=np.float64) -> Network:
        net = Network(self.spec, rng=None, dtype=dtype)
        net.load_param_arrays(self.param_arrays)
        return net


def _expected_shapes(spec: NetworkSpec) -> list:
    """Parameter array shapes in serialization order for a NetworkSpec."""
    shapes = []
    k, w, ic = spec.kernel, spec.width, spec.in_channels

    def conv(i, o):
        shapes.append((o, i, k, k))
        shapes.append((o,))

    def bn(c):
        for _ in range(4):
            shapes.append((c,))

    ch = ic
    for kind in spec.blocks:
        if kind == "CBN":
            conv(ch, w); bn(w); ch = w
        elif kind == "Branch":
            conv(ch, w); bn(w); conv(ch, w); conv(w, w)
        elif kind == "Res":
            conv(ch, w); bn(w); conv(w, w); bn(w)
        else:  # OutputConv
            conv(ch, ic); ch = ic
    return shapes


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    desc = ckpt.spec.to_json_dict()
    desc["epoch"] = int(ckpt.epoch)
    desc["seed"] = int(ckpt.seed)
    desc["loss_history"] = [[int(e), float(t), float(v)]
                            for e, t, v in ckpt.loss_history]
    desc_bytes = json.dumps(desc, sort_keys=True,
                            separators=(",", ":")).encode()
    shapes = _expected_shapes(ckpt.spec)
    if len(shapes) != len(ckpt.param_arrays):
        raise DataFormatError(
            f"checkpoint holds {len(ckpt.param_arrays)} arrays, "
            f"spec requires {len(shapes)}")
    chunks = [CHECKPOINT_MAGIC,
              struct.pack("<I", ckpt.version),
              struct.pack("<I", len(desc_bytes)),
              desc_bytes]
    for arr, shape in zip(ckpt.param_arrays, shapes):
        a = np.ascontiguousarray(arr, dtype="<f8")
        if a.shape != shape:
            raise DataFormatError(
                f"parameter shape {a.shape} != expected {shape}")
        chunks.append(a.tobytes())
    body = b"".join(chunks)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(body)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: header cut short")
    version, = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: version {version}, this build reads {CHECKPOINT_VERSION}")
    desc_len, = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + desc_len + 4:
        raise TruncatedFileError(f"{path}: descriptor cut short")
    try:
        desc = json.loads(raw[12:12 + desc_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: bad descriptor: {e}") from None
    spec = NetworkSpec.from_json_dict(desc)
    shapes = _expected_shapes(spec)
    count = sum(int(np.prod(s)) for s in shapes)
    need = 12 + desc_len + 8 * count + 4
    if len(raw) < need:
        raise TruncatedFileError(
            f"{path}: expected {need} bytes, got {len(raw)}")
    if len(raw) > need:
        raise DataFormatError(f"{path}: {len(raw) - need} trailing bytes")
    stored_crc, = struct.unpack("<I", raw[need - 4:need])
    if zlib.crc32(raw[:need - 4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatchError(f"{path}: CRC mismatch")
    flat = np.frombuffer(raw[12 + desc_len:need - 4], dtype="<f8")
    arrays, off = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[off:off + size].astype(np.float64).reshape(s))
        off += size
    return Checkpoint(spec=spec, param_arrays=arrays,
                      epoch=int(desc.get("epoch", 0)),
                      seed=int(desc.get("seed", 0)),
                      loss_history=[(int(e), float(t), float(v))
                                    for e, t, v in desc.get("loss_history", [])],
                      version=version)


# ---------------------------------------------------------------------------
# inference

def network_forward(noisy: np.ndarray, net, mode: Mode = Mode.INFER
                    ) -> np.ndarray:
    """Predict the noise tensor for an NCHW batch of any spatial size >= 3."""
    if isinstance(net, Checkpoint):
        net = net.to_network()
    n, c, h, w = noisy.shape
    if c != net.spec.in_channels:
        raise ShapeError(
            f"expected {net.spec.in_channels} channel(s), got shape {noisy.shape}")
    if h < 3 or w < 3:
        raise ShapeError(f"spatial dims must be >= 3x3, got {h}x{w}")
    x = nchw_to_nhwc(noisy.astype(net.dtype, copy=False))
    out = net.forward(x, mode)
    return nhwc_to_nchw(out).astype(noisy.dtype, copy=False)


def denoise(noisy_image: np.ndarray, net) -> np.ndarray:
    """Subtract the predicted noise from a 2-D [0,1] image and clamp."""
    img = np.asarray(noisy_image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {img.shape}")
    pred = network_forward(img[None, None, :, :], net)[0, 0]
    return np.clip(img - pred, 0.0, 1.0)
