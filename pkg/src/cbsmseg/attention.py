"""Channel, spatial and pixel attention gates and the blocks built from them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    ConfigError,
    ConvParams,
    DimensionError,
    Tensor,
    add,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    global_avg_pool,
    he_uniform_conv,
    mul,
    relu,
    sigmoid,
)

VARIANTS = ("none", "conventional", "proposed")

DEFAULT_RATIO = 8
DEFAULT_SPATIAL_KERNEL = 7


def hidden_width(channels: int, ratio: int) -> int:
    return max(channels // ratio, 1)


@dataclass
class ChannelGateParams:
    reduce: ConvParams
    expand: ConvParams
    ratio: int = DEFAULT_RATIO

    @property
    def channels(self) -> int:
        return self.reduce.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return self.reduce.parameters() + self.expand.parameters()


@dataclass
class SpatialGateParams:
    conv: ConvParams

    def parameters(self) -> list[Tensor]:
        return self.conv.parameters()


@dataclass
class PixelGateParams:
    reduce: ConvParams
    expand: ConvParams

    @property
    def channels(self) -> int:
        return self.reduce.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return self.reduce.parameters() + self.expand.parameters()


@dataclass
class CbsmBlock:
    variant: str
    channel: ChannelGateParams
    spatial: SpatialGateParams
    pixel: Optional[PixelGateParams] = None

    def __post_init__(self):
        if self.variant not in ("conventional", "proposed"):
            raise ConfigError(f"attention block variant must be 'conventional' or 'proposed', got {self.variant!r}")
        if (self.pixel is not None) != (self.variant == "proposed"):
            raise ConfigError("pixel gate must be present exactly when variant is 'proposed'")

    def parameters(self) -> list[Tensor]:
        params = self.channel.parameters() + self.spatial.parameters()
        if self.pixel is not None:
            params += self.pixel.parameters()
        return params

    def __call__(self, x: Tensor) -> Tensor:
        if self.variant == "proposed":
            return cbsm_forward(x, self)
        return cbam_conventional_forward(x, self)


def make_block(variant: str, channels: int, rng: np.random.Generator, *, ratio: int = DEFAULT_RATIO,
               spatial_kernel: int = DEFAULT_SPATIAL_KERNEL, dtype=np.float64) -> CbsmBlock:
    """Fresh attention block with He-uniform gate weights drawn from ``rng``."""
    hid = hidden_width(channels, ratio)
    channel = ChannelGateParams(
        reduce=he_uniform_conv(rng, hid, channels, 1, dtype=dtype),
        expand=he_uniform_conv(rng, channels, hid, 1, dtype=dtype),
        ratio=ratio,
    )
    spatial = SpatialGateParams(conv=he_uniform_conv(rng, 1, 2, spatial_kernel, dtype=dtype))
    pixel = None
    if variant == "proposed":
        pixel = PixelGateParams(
            reduce=he_uniform_conv(rng, hid, channels, 1, dtype=dtype),
            expand=he_uniform_conv(rng, 1, hid, 1, dtype=dtype),
        )
    return CbsmBlock(variant, channel, spatial, pixel)


def _check_channels(x: Tensor, expected: int, what: str) -> None:
    if x.data.ndim != 4 or x.shape[1] != expected:
        raise DimensionError(f"{what} expects {expected} channels, got input of shape {x.shape}")


def channel_attention(x: Tensor, g: ChannelGateParams) -> Tensor:
    """Per-channel gate in (0, 1), shape (N, C, 1, 1), from spatially averaged features."""
    _check_channels(x, g.channels, "channel_attention")
    return sigmoid(conv2d(relu(conv2d(global_avg_pool(x), g.reduce)), g.expand))


def spatial_attention(x: Tensor, g: SpatialGateParams) -> Tensor:
    """Per-position gate in (0, 1), shape (N, 1, H, W).

    Pools across channels (max plane first, then mean plane) and convolves the
    two-plane stack down to one map.
    """
    return sigmoid(conv2d(concat_channels(channel_max(x), channel_mean(x)), g.conv))


def pixel_attention(x: Tensor, g: PixelGateParams) -> Tensor:
    """Per-pixel gate in (0, 1), shape (N, 1, H, W), using only 1x1 convolutions."""
    _check_channels(x, g.channels, "pixel_attention")
    return sigmoid(conv2d(relu(conv2d(x, g.reduce)), g.expand))


def _refine(gate: Tensor, x: Tensor) -> Tensor:
    return mul(add(gate, 1.0), x)


def cbsm_forward(x: Tensor, b: CbsmBlock) -> Tensor:
    """Channel, then spatial, then pixel refinement, each scaling by (gate + 1)."""
    if b.variant != "proposed":
        raise ConfigError(f"cbsm_forward needs a 'proposed' block, got {b.variant!r}")
    fc = _refine(channel_attention(x, b.channel), x)
    fs = _refine(spatial_attention(fc, b.spatial), fc)
    return _refine(pixel_attention(fs, b.pixel), fs)


def cbam_conventional_forward(x: Tensor, b: CbsmBlock) -> Tensor:
    """Channel then spatial gating with plain multiplication."""
    if b.variant != "conventional":
        raise ConfigError(f"cbam_conventional_forward needs a 'conventional' block, got {b.variant!r}")
    fc = mul(channel_attention(x, b.channel), x)
    return mul(spatial_attention(fc, b.spatial), fc)
