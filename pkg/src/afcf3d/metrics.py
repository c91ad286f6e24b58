"""Confusion counting and the precision / recall / F1 / IoU report."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ConfigurationError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(a, what: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.all((a == 0) | (a == 1)):
        raise ConfigurationError(f"{what} must be binary (0/1)")
    return a.astype(bool)


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    """Probability >= threshold counts as changed."""
    return np.asarray(prob) >= threshold


def confusion(pred, truth) -> ConfusionCounts:
    pred = _binary(pred, "prediction")
    truth = _binary(truth, "ground truth")
    if pred.shape != truth.shape:
        raise ConfigurationError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    iou: float
    counts: ConfusionCounts

    def to_dict(self) -> dict:
        c = self.counts
        return {
            "precision": round(100 * self.precision, 2),
            "recall": round(100 * self.recall, 2),
            "f1": round(100 * self.f1, 2),
            "iou": round(100 * self.iou, 2),
            "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        d = self.to_dict()
        return "\n".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in d.items()) + "\n"


def metrics(c: ConfusionCounts) -> MetricsReport:
    """Degenerate denominators: P, R, F1 fall back to 0; IoU to 1 when nothing is changed or predicted."""
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    union = c.tp + c.fp + c.fn
    iou = c.tp / union if union else 1.0
    return MetricsReport(precision, recall, f1, iou, c)
