"""Grey-scale erosion/dilation with learnable additive structuring elements,
and the spatial/spectral token generators built on them.

Patches enter channel-first, ``(..., C', P, P)``.  Spatial tokens come out
as ``(..., P*P, D)`` in row-major pixel order; spectral tokens as
``(..., C', D)`` in band order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import Tensor


@dataclass
class StructuringElement:
    """Additive SE weights of shape ``(C, kh, kw)``, trainable by default."""

    weights: Tensor

    @classmethod
    def ones(cls, channels: int, kh: int, kw: int | None = None, dtype=np.float32) -> "StructuringElement":
        kw = kh if kw is None else kw
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"structuring element extents must be odd, got {kh}x{kw}")
        return cls(Tensor(np.ones((channels, kh, kw), dtype=dtype), requires_grad=True))

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[1], self.weights.shape[2]


def _se_tensor(se) -> Tensor:
    return se.weights if isinstance(se, StructuringElement) else nx.as_tensor(se)


def _check(x: Tensor, se: Tensor, op: str) -> None:
    if x.ndim < 3 or se.ndim != 3 or x.shape[-3] != se.shape[0]:
        raise DimensionError(f"{op}: patch {x.shape} and structuring element {se.shape} disagree")


def dilate(x: Tensor, se) -> Tensor:
    """max over the in-bounds window of x(i) + se(i - j)."""
    se = _se_tensor(se)
    _check(x, se, "dilate")
    return nx.windowed_max(x, se)


def erode(x: Tensor, se) -> Tensor:
    """min over the in-bounds window of x(i) - se(i - j), computed as -dilate(-x, se)."""
    se = _se_tensor(se)
    _check(x, se, "erode")
    return nx.neg(nx.windowed_max(nx.neg(x), se))


def _separable(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    x = nx.depthwise_conv2d(x, params["dw_weight"], params["dw_bias"])
    return nx.pointwise_conv(x, params["pw_weight"], params["pw_bias"])


def _morph_stack(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    return nx.concat([erode(x, params["erode_se"]), dilate(x, params["dilate_se"])], axis=-3)


def _spatial_grid(patch: Tensor) -> tuple[tuple[int, ...], int]:
    if patch.ndim < 3 or patch.shape[-1] != patch.shape[-2]:
        raise DimensionError(f"expected a (..., C, P, P) patch, got {patch.shape}")
    return patch.shape[:-3], patch.shape[-1]


def _as_spatial_tokens(feat: Tensor, lead: tuple[int, ...], p: int) -> Tensor:
    d = feat.shape[-3]
    flat = nx.reshape(feat, lead + (d, p * p))
    return nx.swap_last(flat)


def _band_sequence(patch: Tensor) -> Tensor:
    """(..., C', P, P) -> (..., P*P, C', 1): pixels become channels, bands the 1-D axis."""
    lead, p = _spatial_grid(patch)
    c = patch.shape[-3]
    x = nx.reshape(patch, lead + (c, p * p))
    x = nx.swap_last(x)
    return nx.reshape(x, lead + (p * p, c, 1))


def _as_spectral_tokens(feat: Tensor, lead: tuple[int, ...]) -> Tensor:
    d, c = feat.shape[-3], feat.shape[-2]
    return nx.swap_last(nx.reshape(feat, lead + (d, c)))


def spatial_tokens(patch: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Erode and dilate over the pixel grid, concatenate, then depthwise-separable conv to D."""
    lead, p = _spatial_grid(patch)
    feat = _separable(_morph_stack(patch, params), params)
    return _as_spatial_tokens(feat, lead, p)


def spectral_tokens(patch: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Same pipeline run along the band axis with k x 1 windows, one channel per pixel."""
    lead, _ = _spatial_grid(patch)
    x = _band_sequence(patch)
    feat = _separable(_morph_stack(x, params), params)
    return _as_spectral_tokens(feat, lead)


def plain_tokens(patch: Tensor, params: Mapping[str, Tensor], axis: Literal["spatial", "spectral"]) -> Tensor:
    """Token generator without the morphology stage (depthwise-separable conv only)."""
    lead, p = _spatial_grid(patch)
    if axis == "spatial":
        return _as_spatial_tokens(_separable(patch, params), lead, p)
    if axis == "spectral":
        return _as_spectral_tokens(_separable(_band_sequence(patch), params), lead)
    raise ConfigError(f"axis must be 'spatial' or 'spectral', got {axis!r}")


def token_param_shapes(
    axis: Literal["spatial", "spectral"], morphological: bool, bands: int, patch: int, d_model: int, k: int
) -> dict[str, tuple[int, ...]]:
    """Parameter shapes of one token generator."""
    if axis == "spatial":
        channels, window = bands, (k, k)
    else:
        channels, window = patch * patch, (k, 1)
    shapes: dict[str, tuple[int, ...]] = {}
    if morphological:
        shapes["erode_se"] = (channels,) + window
        shapes["dilate_se"] = (channels,) + window
        channels *= 2
    shapes["dw_weight"] = (channels,) + window
    shapes["dw_bias"] = (channels,)
    shapes["pw_weight"] = (d_model, channels)
    shapes["pw_bias"] = (d_model,)
    return shapes
