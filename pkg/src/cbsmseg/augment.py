"""Sixfold deterministic augmentation: contrast, blur, horizontal flip and their combinations."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import correlate1d

PROVENANCES = ("original", "contrast", "blur", "flip", "flip-contrast", "flip-blur")

DEFAULT_ALPHA = 1.5
DEFAULT_SIGMA = 1.0


@dataclass
class SamplePair:
    id: str
    image: np.ndarray  # (H, W) float in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    provenance: str = "original"
    split: str = "train"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 2:
            raise ValueError(f"{self.id}: image must be 2-D, got shape {self.image.shape}")
        if self.image.shape != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ in size")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError(f"{self.id}: mask is not binary")
        self.mask = self.mask.astype(np.uint8)
        if self.provenance not in PROVENANCES:
            raise ValueError(f"{self.id}: unknown provenance {self.provenance!r}")


def contrast_adjust(image: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Linear stretch about mid-grey: clamp(alpha * (p - 0.5) + 0.5, 0, 1)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return np.clip(alpha * (np.asarray(image, dtype=np.float64) - 0.5) + 0.5, 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian truncated at radius ceil(3 sigma), normalised to sum 1."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = math.ceil(3 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Separable Gaussian blur with mirror (half-sample symmetric) borders."""
    k = gaussian_kernel(sigma)
    out = correlate1d(np.asarray(image, dtype=np.float64), k, axis=0, mode="reflect")
    out = correlate1d(out, k, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def hflip(pair: SamplePair) -> SamplePair:
    """Mirror image and mask left to right."""
    return replace(pair, image=pair.image[:, ::-1].copy(), mask=pair.mask[:, ::-1].copy())


def _variant(src: SamplePair, tag: str, image: np.ndarray, base_id: str) -> SamplePair:
    return SamplePair(f"{base_id}-{tag}", image, src.mask.copy(), tag, src.split)


def augment_pair(pair: SamplePair, alpha: float = DEFAULT_ALPHA, sigma: float = DEFAULT_SIGMA) -> list[SamplePair]:
    """The six variants of one original pair, in ``PROVENANCES`` order.

    The blurred variant is blurred after the contrast stretch, and the flipped
    branch repeats the same two photometric steps on the mirrored pair.
    """
    if pair.provenance != "original":
        raise ValueError(f"{pair.id}: only original pairs can be augmented, got provenance {pair.provenance!r}")
    flipped = hflip(pair)
    c = contrast_adjust(pair.image, alpha)
    fc = contrast_adjust(flipped.image, alpha)
    return [
        _variant(pair, "original", pair.image.copy(), pair.id),
        _variant(pair, "contrast", c, pair.id),
        _variant(pair, "blur", gaussian_blur(c, sigma), pair.id),
        _variant(flipped, "flip", flipped.image, pair.id),
        _variant(flipped, "flip-contrast", fc, pair.id),
        _variant(flipped, "flip-blur", gaussian_blur(fc, sigma), pair.id),
    ]


def augment_dataset(pairs: list[SamplePair], alpha: float = DEFAULT_ALPHA,
                    sigma: float = DEFAULT_SIGMA) -> list[SamplePair]:
    """Expand every original pair into its six variants (output is 6x the input)."""
    bad = [p.id for p in pairs if p.provenance != "original"]
    if bad:
        raise ValueError(f"augment_dataset accepts only original pairs; already augmented: {', '.join(bad)}")
    out: list[SamplePair] = []
    for p in pairs:
        out.extend(augment_pair(p, alpha, sigma))
    return out
