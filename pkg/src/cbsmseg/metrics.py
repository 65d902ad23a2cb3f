"""Pixel-level confusion counts and the overlap/classification measures built on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CSV_COLUMNS = ("accuracy", "recall", "specificity", "precision", "f1", "dice", "iou")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _binary(a, what: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{what} must be binary (0/1)")
    return a.astype(bool)


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred = _binary(pred_mask, "prediction mask")
    gt = _binary(gt_mask, "ground-truth mask")
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


# Zero denominators: a ratio with nothing to measure is 1 when the matching
# error kind is also absent, 0 otherwise. Never NaN.


def iou(c: ConfusionCounts) -> float:
    den = c.tp + c.fp + c.fn
    return 1.0 if den == 0 else c.tp / den


def dice(c: ConfusionCounts) -> float:
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def accuracy(c: ConfusionCounts) -> float:
    return 1.0 if c.total == 0 else (c.tp + c.tn) / c.total


def recall(c: ConfusionCounts) -> float:
    den = c.tp + c.fn
    if den == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / den


def specificity(c: ConfusionCounts) -> float:
    den = c.tn + c.fp
    if den == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tn / den


def precision(c: ConfusionCounts) -> float:
    den = c.tp + c.fp
    if den == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / den


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass(frozen=True)
class MetricReport:
    iou: float
    dice: float
    accuracy: float
    recall: float
    specificity: float
    precision: float
    f1: float
    counts: ConfusionCounts

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> "MetricReport":
        return cls(iou(c), dice(c), accuracy(c), recall(c), specificity(c), precision(c), f1(c), c)

    def values(self) -> tuple[float, ...]:
        """Values in CSV column order."""
        return tuple(getattr(self, k) for k in CSV_COLUMNS)

    def csv_row(self) -> str:
        return ",".join(repr(float(v)) for v in self.values())


def csv_header() -> str:
    return ",".join(CSV_COLUMNS)


def evaluate_masks(preds, gts) -> MetricReport:
    """Micro-averaged report: counts are summed over every pixel of every pair first."""
    total = ConfusionCounts(0, 0, 0, 0)
    for p, g in zip(preds, gts, strict=True):
        total = total + confusion(p, g)
    return MetricReport.from_counts(total)


def evaluate_set(model, pairs, threshold: float = 0.5, batch_size: int = 16) -> MetricReport:
    """Threshold the model's predictions over ``pairs`` and micro-average the metrics."""
    from .unet import predict_proba, threshold_mask

    if len(pairs) == 0:
        raise ValueError("evaluate_set needs at least one pair")
    images = np.stack([p.image for p in pairs])
    masks = threshold_mask(predict_proba(model, images, batch_size), threshold)[:, 0]
    return evaluate_masks(masks, [p.mask for p in pairs])
