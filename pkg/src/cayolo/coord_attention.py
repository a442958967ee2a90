"""Coordinate attention block with an analytic backward pass.

The block pools the input along each spatial axis, runs the two pooled
profiles through a shared 1x1 conv + BN + ReLU bottleneck, splits the result
back into a row part and a column part, and turns each into sigmoid gates::

    qh[n,c,h] = mean_w x[n,c,h,w]          qw[n,c,w] = mean_h x[n,c,h,w]
    f  = relu(bn(conv_f1([qh, qw])))        (length H + W along the spatial axis)
    gh = sigmoid(conv_fh(f[..., :H]))       gw = sigmoid(conv_fw(f[..., H:]))
    y[n,c,i,j] = x[n,c,i,j] * gh[n,c,i] * gw[n,c,j]

All three convolutions are 1x1, so they are written here as channel
contractions on (N, C, L) profiles instead of going through ``conv2d``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor_core import BNParams, ConvParams, sigmoid


def hidden_channels(channels: int, reduction: int) -> int:
    """Bottleneck width: ``max(1, floor(C / r))``."""
    if channels < 1 or reduction < 1:
        raise ParameterError(f"need C >= 1 and r >= 1, got C={channels}, r={reduction}")
    return max(1, channels // reduction)


@dataclass(frozen=True)
class CAParams:
    f1: ConvParams
    bn: BNParams
    fh: ConvParams
    fw: ConvParams
    reduction: int

    def __post_init__(self):
        c = self.f1.in_channels
        m = hidden_channels(c, self.reduction)
        for name, conv, shape in (("f1", self.f1, (m, c, 1, 1)),
                                  ("fh", self.fh, (c, m, 1, 1)),
                                  ("fw", self.fw, (c, m, 1, 1))):
            if conv.weight.shape != shape:
                raise ShapeError(f"CA {name} weight shape {conv.weight.shape}, expected {shape}")
            if conv.stride != 1 or conv.padding != 0:
                raise ShapeError(f"CA {name} must be a 1x1 stride-1 unpadded conv")
        if self.bn.channels != m:
            raise ShapeError(f"CA BN has {self.bn.channels} channels, expected {m}")

    @property
    def channels(self) -> int:
        return self.f1.in_channels

    @property
    def hidden(self) -> int:
        return self.f1.out_channels

    def arrays(self) -> dict:
        """Learnable arrays keyed by name (running statistics excluded)."""
        return {
            "f1.weight": self.f1.weight, "f1.bias": self.f1.bias,
            "bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta,
            "fh.weight": self.fh.weight, "fh.bias": self.fh.bias,
            "fw.weight": self.fw.weight, "fw.bias": self.fw.bias,
        }

    def with_arrays(self, updates: dict) -> "CAParams":
        """Copy with some learnable arrays replaced (keys as in :meth:`arrays`)."""
        parts = {"f1": self.f1, "bn": self.bn, "fh": self.fh, "fw": self.fw}
        for key, value in updates.items():
            part, attr = key.split(".")
            parts[part] = replace(parts[part], **{attr: value})
        return CAParams(reduction=self.reduction, **parts)


def init_ca_params(channels: int, reduction: int = 16, rng: Optional[np.random.Generator] = None,
                   dtype=np.float64) -> CAParams:
    """He-uniform weights, zero biases, identity BN statistics."""
    rng = np.random.default_rng(0) if rng is None else rng
    m = hidden_channels(channels, reduction)

    def he(out_c, in_c):
        bound = np.sqrt(6.0 / in_c)
        return rng.uniform(-bound, bound, size=(out_c, in_c, 1, 1)).astype(dtype)

    return CAParams(
        f1=ConvParams(he(m, channels), np.zeros(m, dtype)),
        bn=BNParams.identity(m, dtype=dtype),
        fh=ConvParams(he(channels, m), np.zeros(channels, dtype)),
        fw=ConvParams(he(channels, m), np.zeros(channels, dtype)),
        reduction=reduction,
    )


@dataclass(frozen=True)
class CAGrads:
    """Gradients of ``L = <dy, y>`` with respect to the input and every learnable array."""

    d_input: np.ndarray
    d_params: dict


@dataclass(frozen=True)
class CACache:
    x: np.ndarray
    params: CAParams
    z: np.ndarray       # stacked pooled profiles, (N, C, H+W)
    a: np.ndarray       # conv_f1 output, (N, m, H+W)
    u: np.ndarray       # after BN
    f: np.ndarray       # after ReLU
    gh: np.ndarray      # (N, C, H)
    gw: np.ndarray      # (N, C, W)


def directional_pool(x: np.ndarray):
    """Average over width and over height.

    Returns ``qh`` of shape (N, C, H, 1) and ``qw`` of shape (N, C, 1, W).
    """
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W), got {x.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("directional_pool needs H >= 1 and W >= 1")
    return x.mean(axis=3, keepdims=True), x.mean(axis=2, keepdims=True)


def _pointwise(conv: ConvParams, t: np.ndarray) -> np.ndarray:
    # 1x1 conv on an (N, C, L) profile
    out = np.einsum("oc,ncl->nol", conv.weight[:, :, 0, 0], t)
    if conv.bias is not None:
        out += conv.bias[None, :, None]
    return out


def ca_forward(x: np.ndarray, p: CAParams):
    """Apply coordinate attention; returns ``(y, cache)``."""
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W), got {x.shape}")
    if x.shape[1] != p.channels:
        raise ShapeError(f"CA block built for {p.channels} channels, input has {x.shape[1]}")
    h = x.shape[2]
    qh, qw = directional_pool(x)
    z = np.concatenate([qh[..., 0], qw[:, :, 0, :]], axis=2)
    a = _pointwise(p.f1, z)
    scale = p.bn.gamma / np.sqrt(p.bn.running_var + p.bn.eps)
    u = (a - p.bn.running_mean[None, :, None]) * scale[None, :, None] + p.bn.beta[None, :, None]
    f = np.maximum(u, 0)
    gh = sigmoid(_pointwise(p.fh, f[:, :, :h]))
    gw = sigmoid(_pointwise(p.fw, f[:, :, h:]))
    y = x * gh[:, :, :, None] * gw[:, :, None, :]
    return y, CACache(x, p, z, a, u, f, gh, gw)


def ca_backward(cache: CACache, dy: np.ndarray) -> CAGrads:
    """Adjoint of :func:`ca_forward` for upstream gradient ``dy``."""
    x, p = cache.x, cache.params
    if dy.shape != x.shape:
        raise ShapeError(f"dy shape {dy.shape} != forward output shape {x.shape}")
    n, c, h, w = x.shape
    gh, gw, f = cache.gh, cache.gw, cache.f

    gate = gh[:, :, :, None] * gw[:, :, None, :]
    dx = dy * gate
    dyx = dy * x
    dgh = np.einsum("nchw,ncw->nch", dyx, gw)
    dgw = np.einsum("nchw,nch->ncw", dyx, gh)
    dsh = dgh * gh * (1.0 - gh)
    dsw = dgw * gw * (1.0 - gw)

    fh, fw = f[:, :, :h], f[:, :, h:]
    d_fh_w = np.einsum("ncl,nml->cm", dsh, fh)[:, :, None, None]
    d_fw_w = np.einsum("ncl,nml->cm", dsw, fw)[:, :, None, None]
    df = np.concatenate([
        np.einsum("cm,ncl->nml", p.fh.weight[:, :, 0, 0], dsh),
        np.einsum("cm,ncl->nml", p.fw.weight[:, :, 0, 0], dsw),
    ], axis=2)

    du = df * (cache.u > 0)
    inv_std = 1.0 / np.sqrt(p.bn.running_var + p.bn.eps)
    a_hat = (cache.a - p.bn.running_mean[None, :, None]) * inv_std[None, :, None]
    d_gamma = (du * a_hat).sum(axis=(0, 2))
    d_beta = du.sum(axis=(0, 2))
    da = du * (p.bn.gamma * inv_std)[None, :, None]

    d_f1_w = np.einsum("nml,ncl->mc", da, cache.z)[:, :, None, None]
    dz = np.einsum("mc,nml->ncl", p.f1.weight[:, :, 0, 0], da)
    dx = dx + dz[:, :, :h, None] / w + dz[:, :, None, h:] / h

    d_params = {
        "f1.weight": d_f1_w, "f1.bias": da.sum(axis=(0, 2)),
        "bn.gamma": d_gamma, "bn.beta": d_beta,
        "fh.weight": d_fh_w, "fh.bias": dsh.sum(axis=(0, 2)),
        "fw.weight": d_fw_w, "fw.bias": dsw.sum(axis=(0, 2)),
    }
    return CAGrads(dx, d_params)


def ca_param_count(channels: int, reduction: int) -> int:
    """Learnable scalars in one block (conv weights + biases, BN gamma/beta)."""
    m = hidden_channels(channels, reduction)
    return channels * m + m + 2 * m + 2 * (m * channels + channels)
