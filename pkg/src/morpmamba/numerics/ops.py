"""Network primitives: softmax, convolutions, windowed max, standardization.

Spatial operators take ``x`` laid out as ``(..., C, H, W)`` with per-channel
kernels ``(C, kh, kw)``; both kernel extents must be odd.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, make_result


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax_rows")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance rescaling of each vector along the last axis."""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).sum(axis=-1, keepdims=True) / n
        return (inv * (g - gm - out * gy),)

    return make_result(out.astype(x.dtype, copy=False), (x,), bw, "standardize")


def _kernel_extent(w: Tensor, op: str) -> tuple[int, int]:
    if w.ndim != 3:
        raise DimensionError(f"{op}: kernel must be (C, kh, kw), got {w.shape}")
    kh, kw = w.shape[1], w.shape[2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"{op}: kernel extents must be odd, got {kh}x{kw}")
    return kh, kw


def _check_channels(x: Tensor, w: Tensor, op: str) -> None:
    if x.ndim < 3 or x.shape[-3] != w.shape[0]:
        raise DimensionError(f"{op}: input {x.shape} does not match kernel {w.shape}")


def depthwise_conv2d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 2-D correlation with zero 'same' padding, plus bias."""
    kh, kw = _kernel_extent(w, "depthwise_conv2d")
    _check_channels(x, w, "depthwise_conv2d")
    bias = as_tensor(bias, x.dtype)
    if bias.shape != (w.shape[0],):
        raise DimensionError(f"depthwise_conv2d: bias {bias.shape} for {w.shape[0]} channels")
    H, W = x.shape[-2:]
    rh, rw = kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(rh, rh), (rw, rw)]
    xp = np.pad(x.data, pad)
    out = np.zeros(x.shape, dtype=np.result_type(x.data, w.data))
    for di in range(kh):
        for dj in range(kw):
            out += xp[..., di : di + H, dj : dj + W] * w.data[:, di, dj, None, None]
    out += bias.data[:, None, None]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        lead = tuple(range(g.ndim - 3))
        for di in range(kh):
            for dj in range(kw):
                gxp[..., di : di + H, dj : dj + W] += g * w.data[:, di, dj, None, None]
                gw[:, di, dj] = (g * xp[..., di : di + H, dj : dj + W]).sum(axis=lead + (-2, -1))
        gx = gxp[..., rh : rh + H, rw : rw + W]
        gb = g.sum(axis=lead + (-2, -1))
        return gx, gw, gb

    return make_result(out, (x, w, bias), bw, "depthwise_conv2d")


def pointwise_conv(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution: per-pixel linear map from C to D channels."""
    if w.ndim != 2 or x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise DimensionError(f"pointwise_conv: input {x.shape} does not match weight {w.shape}")
    bias = as_tensor(bias, x.dtype)
    if bias.shape != (w.shape[0],):
        raise DimensionError(f"pointwise_conv: bias {bias.shape} for {w.shape[0]} outputs")
    ax = x.ndim - 3
    out = np.moveaxis(np.tensordot(w.data, x.data, axes=([1], [ax])), 0, ax) + bias.data[:, None, None]

    def bw(g):
        gx = np.moveaxis(np.tensordot(w.data, g, axes=([0], [ax])), 0, ax)
        rest = [i for i in range(g.ndim) if i != ax]
        gw = np.tensordot(g, x.data, axes=(rest, rest))
        gb = g.sum(axis=tuple(rest))
        return gx, gw, gb

    return make_result(out, (x, w, bias), bw, "pointwise_conv")


def windowed_max(x: Tensor, se: Tensor) -> Tensor:
    """out[c, j] = max over in-bounds i in the window at j of x[c, i] + se[c, i - j].

    Positions outside the grid are excluded (equivalent to -inf padding).
    The backward pass sends each output gradient to the first row-major
    arg-max of its window, both for ``x`` and for ``se``.
    """
    kh, kw = _kernel_extent(se, "windowed_max")
    _check_channels(x, se, "windowed_max")
    H, W = x.shape[-2:]
    rh, rw = kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(rh, rh), (rw, rw)]
    xp = np.pad(x.data, pad, constant_values=-np.inf)
    dtype = np.result_type(x.data, se.data)
    best = np.full(x.shape, -np.inf, dtype=dtype)
    arg = np.zeros(x.shape, dtype=np.intp)
    n = 0
    for di in range(kh):
        for dj in range(kw):
            cand = xp[..., di : di + H, dj : dj + W] + se.data[:, di, dj, None, None]
            # strict '>' keeps the first row-major offset on ties
            take = cand > best
            best = np.where(take, cand, best)
            arg = np.where(take, n, arg)
            n += 1

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gse = np.zeros_like(se.data)
        lead = tuple(range(g.ndim - 3))
        m = 0
        for di in range(kh):
            for dj in range(kw):
                hit = np.where(arg == m, g, 0)
                gxp[..., di : di + H, dj : dj + W] += hit
                gse[:, di, dj] = hit.sum(axis=lead + (-2, -1))
                m += 1
        return gxp[..., rh : rh + H, rw : rw + W], gse

    return make_result(best, (x, se), bw, "windowed_max")
