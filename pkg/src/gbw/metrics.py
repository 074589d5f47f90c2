"""Confusion-matrix segmentation metrics.

Rows of the confusion matrix index the ground truth and columns the
prediction. Classes whose ratio is 0/0 are reported as NaN, flagged as
undefined, and left out of the means.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .losses import IGNORE


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @classmethod
    def empty(cls, n_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise InvalidInputError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, predictions, truth) -> ConfusionMatrix:
    """Add one prediction/truth pair; truth pixels equal to IGNORE are skipped."""
    pred = np.asarray(predictions)
    gt = np.asarray(truth)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction shape {pred.shape} != truth shape {gt.shape}")
    n = cm.n_classes
    keep = gt != IGNORE
    pred, gt = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if np.any((gt < 0) | (gt >= n)) or np.any((pred < 0) | (pred >= n)):
        raise InvalidInputError(f"labels must lie in [0, {n})")
    cm.counts += np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
    return cm


def _ratio(num, den):
    defined = den > 0
    out = np.full(num.shape, np.nan)
    out[defined] = num[defined] / den[defined]
    return out, defined


@dataclass(frozen=True)
class IouResult:
    per_class: np.ndarray
    defined: np.ndarray
    miou: float


def iou(cm: ConfusionMatrix) -> IouResult:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    per_class, defined = _ratio(tp, c.sum(axis=1) + c.sum(axis=0) - tp)
    miou = float(per_class[defined].mean()) if defined.any() else float("nan")
    return IouResult(per_class, defined, miou)


def recall_precision(cm: ConfusionMatrix):
    """Per-class ``(recall, precision)``; undefined entries are NaN."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    recall, _ = _ratio(tp, c.sum(axis=1))
    precision, _ = _ratio(tp, c.sum(axis=0))
    return recall, precision


def metrics_dict(cm: ConfusionMatrix) -> dict:
    """JSON-ready summary; undefined values become None."""
    res = iou(cm)
    recall, precision = recall_precision(cm)

    def clean(a):
        return [None if np.isnan(x) else float(x) for x in a]

    return {
        "miou": res.miou,
        "iou": clean(res.per_class),
        "iou_defined": res.defined.tolist(),
        "recall": clean(recall),
        "precision": clean(precision),
        "accuracy": float(np.trace(cm.counts) / max(cm.total, 1)),
        "confusion": cm.counts.tolist(),
        "undefined_convention": "0/0 classes are null and excluded from means",
    }
