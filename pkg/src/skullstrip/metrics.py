"""Pixelwise evaluation of predicted brain masks.

Counts are pooled over every image before ratios are taken (micro
averaging).  A ratio whose denominator is zero is reported as 0 and flagged
rather than returned as NaN.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyEvaluation, ShapeMismatch
from .tensor import BCE_EPS

CSV_FIELDS = ("n_images", "bce", "accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass(frozen=True)
class MetricsReport:
    bce: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    n_images: int
    counts: ConfusionCounts
    precision_undefined: bool = False
    recall_undefined: bool = False
    f1_undefined: bool = False

    def as_dict(self) -> dict:
        c = self.counts
        return {
            "n_images": self.n_images,
            "bce": self.bce,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": c.tp,
            "fp": c.fp,
            "fn": c.fn,
            "tn": c.tn,
            "precision_undefined": self.precision_undefined,
            "recall_undefined": self.recall_undefined,
            "f1_undefined": self.f1_undefined,
        }

    def to_kv(self) -> str:
        from .params import format_kv

        return format_kv(self.as_dict())

    def to_csv(self) -> str:
        d = self.as_dict()
        row = ",".join(repr(d[k]) if isinstance(d[k], float) else str(d[k]) for k in CSV_FIELDS)
        return ",".join(CSV_FIELDS) + "\n" + row + "\n"


def confusion(pred: np.ndarray, target: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred) != 0
    target = np.asarray(target) != 0
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    tp = int(np.count_nonzero(pred & target))
    fp = int(np.count_nonzero(pred & ~target))
    fn = int(np.count_nonzero(~pred & target))
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def ratios(counts: ConfusionCounts) -> dict:
    """Accuracy, precision, recall and F1 from pooled counts, with flags."""
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    out = {"precision_undefined": False, "recall_undefined": False, "f1_undefined": False}
    out["accuracy"] = (tp + tn) / counts.total if counts.total else 0.0
    if tp + fp:
        out["precision"] = tp / (tp + fp)
    else:
        out["precision"], out["precision_undefined"] = 0.0, True
    if tp + fn:
        out["recall"] = tp / (tp + fn)
    else:
        out["recall"], out["recall_undefined"] = 0.0, True
    p, r = out["precision"], out["recall"]
    if p + r > 0:
        out["f1"] = 2 * p * r / (p + r)
    else:
        out["f1"], out["f1_undefined"] = 0.0, True
    return out


def bce_sum(probs: np.ndarray, target: np.ndarray, eps: float = BCE_EPS) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    t = np.asarray(target, dtype=np.float64)
    return float(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum())


def compute_report(
    pairs: Iterable[tuple[np.ndarray, np.ndarray]], threshold: float = 0.5
) -> MetricsReport:
    """Micro-averaged report over ``(soft_mask, binary_target)`` pairs."""
    counts = ConfusionCounts()
    loss_sum = 0.0
    n_pixels = 0
    n_images = 0
    for probs, target in pairs:
        probs = np.asarray(probs)
        target = np.asarray(target)
        if probs.shape != target.shape:
            raise ShapeMismatch(f"pair {n_images}: {probs.shape} vs {target.shape}")
        loss_sum += bce_sum(probs, target)
        n_pixels += probs.size
        counts = counts + confusion(probs >= threshold, target)
        n_images += 1
    if n_images == 0:
        raise EmptyEvaluation("no image pairs to evaluate")
    r = ratios(counts)
    return MetricsReport(bce=loss_sum / n_pixels, n_images=n_images, counts=counts, **r)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two binary masks; two empty masks score 1."""
    c = confusion(a, b)
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def report_from_arrays(probs: Sequence[np.ndarray], targets: Sequence[np.ndarray], threshold: float = 0.5) -> MetricsReport:
    return compute_report(zip(probs, targets), threshold)
