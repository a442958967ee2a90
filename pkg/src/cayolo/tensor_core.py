"""Dense NCHW array kernels used by the attention block and the detector graph.

Feature maps are plain ``numpy.ndarray`` objects of rank 4 laid out as
``(batch, channels, height, width)``.  Every function here is pure: inputs are
never modified and the same input always gives a bit-identical result.

Convolution is cross-correlation (no kernel flip), which is what every
mainstream detector implementation computes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import GeometryError, ParameterError, ShapeError

ACTIVATIONS = ("mish", "relu", "leaky", "sigmoid", "linear")
LEAKY_SLOPE = 0.1
SPP_KERNELS = (5, 9, 13)


def _check_map(x, name="x"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 (N, C, H, W) array, got "
                         f"{getattr(x, 'shape', type(x))}")


@dataclass(frozen=True)
class ConvParams:
    """Weights of a 2-D convolution.

    ``weight`` has shape (out_channels, in_channels, kh, kw); ``bias`` is
    either None or a vector of length out_channels.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got shape {self.weight.shape}")
        if self.weight.shape[0] < 1:
            raise ShapeError("conv needs at least one output channel")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match "
                             f"{self.weight.shape[0]} output channels")
        if int(self.stride) < 1:
            raise ParameterError(f"stride must be positive, got {self.stride}")
        if int(self.padding) < 0:
            raise ParameterError(f"padding must be non-negative, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def same(cls, weight, bias=None, stride=1):
        """Build params with 'same' padding ``(k - 1) // 2`` for an odd kernel."""
        kh, kw = weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ParameterError(f"'same' padding needs odd kernels, got {kh}x{kw}")
        return cls(weight, bias, stride, (kh - 1) // 2)


@dataclass(frozen=True)
class BNParams:
    """Inference-mode batch-norm statistics and affine terms."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = self.gamma.shape
        for field in ("beta", "running_mean", "running_var"):
            if getattr(self, field).shape != n:
                raise ShapeError(f"BN {field} shape {getattr(self, field).shape} != gamma shape {n}")
        if np.any(self.running_var < 0):
            raise ParameterError("BN running_var has negative entries")
        if self.eps < 0:
            raise ParameterError(f"BN eps must be non-negative, got {self.eps}")
        if np.any(self.running_var + self.eps <= 0):
            raise ParameterError("BN running_var + eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, channels, eps=1e-5, dtype=np.float64):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), eps)


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlate ``x`` with ``p.weight``.

    Output extent is ``(h + 2*pad - kh) // stride + 1`` along each spatial
    axis.  Computed as a sum over kernel taps of channel contractions, which
    keeps memory at one output-sized buffer.
    """
    _check_map(x)
    n, c, h, w = x.shape
    co, ci, kh, kw = p.weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {ci}")
    s, pad = int(p.stride), int(p.padding)
    ho = (h + 2 * pad - kh) // s + 1
    wo = (w + 2 * pad - kw) // s + 1
    if h + 2 * pad < kh or w + 2 * pad < kw or ho < 1 or wo < 1:
        raise GeometryError(f"conv2d: {kh}x{kw} kernel with pad {pad} does not fit "
                            f"a {h}x{w} input")
    dtype = np.result_type(x, p.weight)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, co, ho, wo), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
            out += np.einsum("oc,nchw->nohw", p.weight[:, :, i, j], patch, optimize=True)
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return out


def batchnorm_infer(x: np.ndarray, p: BNParams) -> np.ndarray:
    _check_map(x)
    if p.channels != x.shape[1]:
        raise ShapeError(f"batchnorm: {p.channels} BN channels for a {x.shape[1]}-channel input")
    scale = p.gamma / np.sqrt(p.running_var + p.eps)
    shift = p.beta - p.running_mean * scale
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def softplus(t: np.ndarray) -> np.ndarray:
    """ln(1 + e^t) without overflow."""
    return np.maximum(t, 0) + np.log1p(np.exp(-np.abs(t)))


def sigmoid(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise activation: mish, relu, leaky (slope 0.1), sigmoid or linear."""
    if kind == "mish":
        return x * np.tanh(softplus(x))
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "leaky":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "linear":
        return x.copy()
    raise ParameterError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def maxpool(x: np.ndarray, k: int) -> np.ndarray:
    """Stride-1 max pooling with ``(k-1)/2`` padding of -inf (same extents)."""
    _check_map(x)
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"maxpool kernel must be odd and positive, got {k}")
    r = (k - 1) // 2
    h, w = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), constant_values=-np.inf)
    # separable: max over rows then over columns
    rows = xp[:, :, 0:h, :]
    for i in range(1, k):
        rows = np.maximum(rows, xp[:, :, i:i + h, :])
    out = rows[:, :, :, 0:w]
    for j in range(1, k):
        out = np.maximum(out, rows[:, :, :, j:j + w])
    return out


def spp(x: np.ndarray, kernels: Sequence[int] = SPP_KERNELS) -> np.ndarray:
    """Concatenate the input with stride-1 max pools of each kernel size."""
    _check_map(x)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise GeometryError("spp needs non-empty spatial extents")
    return concat_channels([x] + [maxpool(x, k) for k in kernels])


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block."""
    _check_map(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def concat_channels(xs: Sequence[np.ndarray]) -> np.ndarray:
    if len(xs) == 0:
        raise ShapeError("concat_channels needs at least one input")
    for i, x in enumerate(xs):
        _check_map(x, f"xs[{i}]")
    n, _, h, w = xs[0].shape
    for i, x in enumerate(xs[1:], 1):
        if x.shape[0] != n or x.shape[2:] != (h, w):
            raise ShapeError(f"concat_channels: input {i} has shape {x.shape}, "
                             f"expected batch {n} and spatial ({h}, {w})")
    return np.concatenate(xs, axis=1)
