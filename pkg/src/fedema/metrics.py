"""Segmentation metrics averaged per image and per class, and a forgetting score.

Any per-image/per-class ratio whose denominator is zero is left out of that
class's average instead of being scored 0 or 1.  A class with no defined
term in any image drops out of the class mean for that metric.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, InvalidLabelError, NotApplicableError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Per-image, per-class counts, each array shaped (images, classes)."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def class_count(self) -> int:
        return self.tp.shape[1]

    @property
    def image_count(self) -> int:
        return self.tp.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_count != self.class_count:
            raise DimensionError("cannot merge confusion matrices over different class counts")
        return ConfusionMatrix(
            np.vstack([self.tp, other.tp]),
            np.vstack([self.fp, other.fp]),
            np.vstack([self.fn, other.fn]),
        )


@dataclass(frozen=True)
class MetricBundle:
    miou: float
    mf1: float
    mprecision: float
    mrecall: float

    def as_dict(self) -> dict:
        return asdict(self)


def confusion_from(pred, true, class_count: int):
    """TP/FP/FN per class for a single image; returns three (K,) int arrays."""
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise DimensionError(f"prediction has {pred.size} pixels, ground truth {true.size}")
    for name, arr in (("prediction", pred), ("ground truth", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= class_count):
            raise InvalidLabelError(f"{name} label outside 0..{class_count - 1}")
    tp = np.bincount(true[pred == true], minlength=class_count)
    pred_count = np.bincount(pred, minlength=class_count)
    true_count = np.bincount(true, minlength=class_count)
    return tp, pred_count - tp, true_count - tp


def confusion_matrix(preds: Sequence, trues: Sequence, class_count: int) -> ConfusionMatrix:
    if len(preds) != len(trues):
        raise DimensionError("need one prediction per ground-truth image")
    rows = [confusion_from(p, t, class_count) for p, t in zip(preds, trues)]
    tp, fp, fn = (np.array([r[i] for r in rows], dtype=np.int64).reshape(-1, class_count) for i in range(3))
    return ConfusionMatrix(tp, fp, fn)


def _class_means(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Mean over images of num/den per class, skipping den == 0; NaN if none."""
    defined = den > 0
    ratio = np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=defined)
    counts = defined.sum(axis=0)
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, ratio.sum(axis=0) / np.maximum(counts, 1), np.nan)


def metric_bundle(cm: ConfusionMatrix) -> MetricBundle:
    if cm.image_count < 1:
        raise NotApplicableError("metrics need at least one image")
    tp, fp, fn = (a.astype(np.float64) for a in (cm.tp, cm.fp, cm.fn))
    iou_k = _class_means(tp, tp + fp + fn)
    pre_k = _class_means(tp, tp + fp)
    rec_k = _class_means(tp, tp + fn)

    # F1 is built from class-level precision and recall; a class present
    # somewhere but never correctly predicted scores 0.
    present = ~np.isnan(iou_k)
    f1_k = np.zeros_like(iou_k)
    both = present & ~np.isnan(pre_k) & ~np.isnan(rec_k) & ((pre_k + rec_k) > 0)
    f1_k[both] = 2 * pre_k[both] * rec_k[both] / (pre_k[both] + rec_k[both])
    f1_k[~present] = np.nan

    def mean(x):
        x = x[~np.isnan(x)]
        return float(x.mean()) if x.size else 0.0

    return MetricBundle(mean(iou_k), mean(f1_k), mean(pre_k), mean(rec_k))


def evaluate_labels(preds: Sequence, trues: Sequence, class_count: int) -> MetricBundle:
    return metric_bundle(confusion_matrix(preds, trues, class_count))


def forgetting_score(histories: Sequence[Sequence[float]]) -> float:
    """Mean drop from best-ever to final mIoU over every phase but the latest.

    ``histories[i]`` is the phase-i evaluation series (oldest first); the
    last entry of ``histories`` is the current phase and is not scored.
    """
    if len(histories) < 2:
        raise NotApplicableError("forgetting needs at least two phases")
    drops = []
    for i, series in enumerate(histories[:-1]):
        series = np.asarray(series, dtype=np.float64)
        if series.size == 0:
            raise NotApplicableError(f"phase {i} has no evaluations")
        drops.append(series.max() - series[-1])
    return float(np.mean(drops))
