"""U-Net with optional attention blocks after every resampling stage."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import DEFAULT_RATIO, DEFAULT_SPATIAL_KERNEL, VARIANTS, CbsmBlock, make_block
from .tensor import (
    ConfigError,
    ConvParams,
    DimensionError,
    GeometryError,
    Tensor,
    concat_channels,
    conv2d,
    conv_transpose2d,
    he_uniform_conv,
    maxpool2d,
    no_grad,
    relu,
    sigmoid,
)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    variant: str = "proposed"
    ratio: int = DEFAULT_RATIO
    spatial_kernel: int = DEFAULT_SPATIAL_KERNEL

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.ratio < 1:
            raise ConfigError(f"ratio must be >= 1, got {self.ratio}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial_kernel must be odd, got {self.spatial_kernel}")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Stage:
    """Two 3x3 same-padded conv + ReLU layers, optionally followed by an attention block."""

    conv1: ConvParams
    conv2: ConvParams
    block: CbsmBlock | None = None
    up: ConvParams | None = None  # decoder stages only

    def parameters(self) -> list[Tensor]:
        params = []
        if self.up is not None:
            params += self.up.parameters()
        params += self.conv1.parameters() + self.conv2.parameters()
        if self.block is not None:
            params += self.block.parameters()
        return params

    def double_conv(self, x: Tensor) -> Tensor:
        return relu(conv2d(relu(conv2d(x, self.conv1)), self.conv2))


@dataclass
class UNetModel:
    config: UNetConfig
    encoder: list[Stage]  # encoder[0] is full resolution, encoder[-1] is the bottleneck
    decoder: list[Stage]  # deepest first
    head: ConvParams
    dtype: np.dtype = field(default=np.dtype(np.float32))

    @property
    def blocks(self) -> list[CbsmBlock]:
        return [s.block for s in self.encoder + self.decoder if s.block is not None]

    def parameters(self) -> list[Tensor]:
        """All trainable tensors in a fixed enumeration order (used by checkpoints)."""
        params: list[Tensor] = []
        for stage in self.encoder + self.decoder:
            params += stage.parameters()
        return params + self.head.parameters()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def check_input(self, shape: tuple[int, ...]) -> None:
        if len(shape) != 4 or shape[1] != 1:
            raise DimensionError(f"U-Net expects a single-channel (N, 1, H, W) input, got {shape}")
        d = self.config.divisor
        if shape[2] % d or shape[3] % d:
            raise GeometryError(
                f"input size {shape[2]}x{shape[3]} must be divisible by {d} for depth {self.config.depth}"
            )

    def forward(self, image, taps: list | None = None) -> Tensor:
        """Per-pixel foreground probabilities, shape (N, 1, H, W).

        When ``taps`` is a list, each attention site appends
        ``(site_name, block_input, block_output)``.
        """
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        self.check_input(x.shape)
        skips = []
        for i, stage in enumerate(self.encoder):
            if i > 0:
                x = maxpool2d(x)
            x = self._stage_out(stage, stage.double_conv(x), f"enc{i}", taps)
            skips.append(x)
        skips.pop()
        for i, stage in enumerate(self.decoder):
            x = conv_transpose2d(x, stage.up)
            x = concat_channels(skips.pop(), x)
            x = self._stage_out(stage, stage.double_conv(x), f"dec{i}", taps)
        return sigmoid(conv2d(x, self.head))

    __call__ = forward

    @staticmethod
    def _stage_out(stage: Stage, x: Tensor, name: str, taps) -> Tensor:
        if stage.block is None:
            return x
        y = stage.block(x)
        if taps is not None:
            taps.append((name, x, y))
        return y


def build_model(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetModel:
    """Deterministically initialised U-Net for ``cfg``."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    attend = cfg.variant != "none"

    def block(ch):
        if not attend:
            return None
        return make_block(cfg.variant, ch, rng, ratio=cfg.ratio, spatial_kernel=cfg.spatial_kernel, dtype=dtype)

    widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
    encoder = []
    in_ch = 1
    for i, ch in enumerate(widths):
        encoder.append(Stage(
            conv1=he_uniform_conv(rng, ch, in_ch, 3, dtype=dtype),
            conv2=he_uniform_conv(rng, ch, ch, 3, dtype=dtype),
            block=block(ch) if i > 0 else None,
        ))
        in_ch = ch
    decoder = []
    for ch in reversed(widths[:-1]):
        up = he_uniform_conv(rng, ch, 2 * ch, 2, stride=2, padding=0, transposed=True, dtype=dtype)
        decoder.append(Stage(
            up=up,
            conv1=he_uniform_conv(rng, ch, 2 * ch, 3, dtype=dtype),
            conv2=he_uniform_conv(rng, ch, ch, 3, dtype=dtype),
            block=block(ch),
        ))
    head = he_uniform_conv(rng, 1, widths[0], 1, dtype=dtype)
    return UNetModel(cfg, encoder, decoder, head, dtype)


def forward(model: UNetModel, image) -> Tensor:
    return model.forward(image)


def predict_proba(model: UNetModel, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Forward pass without graph recording, batched; returns an (N, 1, H, W) array."""
    images = np.asarray(images, dtype=model.dtype)
    if images.ndim == 3:
        images = images[:, None]
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model.forward(Tensor(images[i:i + batch_size])).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 1) + images.shape[2:], dtype=model.dtype)


def threshold_mask(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly between 0 and 1, got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def predict_mask(model: UNetModel, image, threshold: float = 0.5) -> np.ndarray:
    """Binary mask: 1 where the predicted probability is >= ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly between 0 and 1, got {threshold}")
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    return threshold_mask(predict_proba(model, data), threshold)
