"""Per-class decomposition of dense-prediction losses.

Logits are arrays of shape ``(..., C)`` and label maps integer arrays of
the matching leading shape; every leading index is one pixel. Pixels
labelled :data:`IGNORE` are dropped from both the losses and the counts.
Pixels of a mini-batch are pooled before per-class normalization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatchError, InvalidInputError
from .qp import ClassWeights

IGNORE = -1

LOSS_KINDS = ("cross_entropy", "focal", "entropy")


@dataclass(frozen=True)
class PerClassLoss:
    loss: np.ndarray
    count: np.ndarray
    active_mask: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.loss.size

    def total(self) -> float:
        """Unweighted aggregate over active classes."""
        return float(self.loss[self.active_mask].sum())


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def flatten_batch(logits, labels=None, confidence=None):
    """Validate and flatten a batch to ``(N, C)`` logits plus ``(N,)`` extras.

    Returns ``(z, y, w, keep)`` where ``keep`` marks non-ignored pixels and
    ``w`` is the per-pixel weight (confidence or 1).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim < 2:
        raise InvalidInputError("logits must have shape (..., C)")
    n_classes = z.shape[-1]
    lead = z.shape[:-1]
    z = z.reshape(-1, n_classes)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")

    if labels is None:
        y = None
        keep = np.ones(z.shape[0], dtype=bool)
    else:
        y = np.asarray(labels)
        if y.shape != lead:
            raise InvalidInputError(f"labels shape {y.shape} does not match logits {lead}")
        if not np.issubdtype(y.dtype, np.integer):
            raise InvalidInputError("labels must be integers")
        y = y.reshape(-1).astype(np.int64)
        keep = y != IGNORE
        if np.any((y[keep] < 0) | (y[keep] >= n_classes)):
            raise InvalidInputError(f"labels must lie in [0, {n_classes}) or equal IGNORE")

    if confidence is None:
        w = np.ones(z.shape[0])
    else:
        w = np.asarray(confidence, dtype=np.float64)
        if w.shape != lead:
            raise InvalidInputError(f"confidence shape {w.shape} does not match logits {lead}")
        w = w.reshape(-1)
        if not np.all(np.isfinite(w)):
            raise InvalidInputError("confidence must be finite")

    if not keep.any():
        raise EmptyBatchError("every pixel in the batch is ignored")
    return z, y, w, keep


def _pixel_terms(z, y, gamma):
    """Per-pixel ``(1 - p)^gamma * (-log p)`` at the labelled class."""
    logp = log_softmax(z)[np.arange(z.shape[0]), y]
    nll = -logp
    if gamma == 0:
        return nll
    return (-np.expm1(logp)) ** gamma * nll


def _reduce_by_class(terms, y, n_classes):
    count = np.bincount(y, minlength=n_classes).astype(np.int64)
    sums = np.bincount(y, weights=terms, minlength=n_classes)
    active = count > 0
    loss = np.zeros(n_classes)
    loss[active] = sums[active] / count[active]
    return PerClassLoss(loss, count, active)


def per_class_cross_entropy(logits, labels, confidence=None) -> PerClassLoss:
    """Mean cross-entropy over the pixels of each class.

    ``loss[c] = sum_{i: y_i = c} w_i * -log softmax(z_i)[c] / |y = c|``
    """
    z, y, w, keep = flatten_batch(logits, labels, confidence)
    z, y, w = z[keep], y[keep], w[keep]
    return _reduce_by_class(w * _pixel_terms(z, y, 0), y, z.shape[1])


def per_class_focal(logits, labels, gamma: float = 2.0, confidence=None) -> PerClassLoss:
    """Focal variant of :func:`per_class_cross_entropy`.

    Each pixel contributes ``(1 - p)^gamma * -log p`` with ``p`` the
    probability of its label.
    """
    gamma = float(gamma)
    if not np.isfinite(gamma) or gamma < 0:
        raise InvalidInputError(f"gamma must be non-negative, got {gamma!r}")
    z, y, w, keep = flatten_batch(logits, labels, confidence)
    z, y, w = z[keep], y[keep], w[keep]
    return _reduce_by_class(w * _pixel_terms(z, y, gamma), y, z.shape[1])


def per_class_entropy(logits, labels=None, confidence=None) -> PerClassLoss:
    """Per-class share of the prediction entropy.

    ``loss[c] = mean_i -s_ic log s_ic`` over the N kept pixels, so the
    class losses sum to the mean Shannon entropy. Every class counts all N
    pixels. ``labels`` only serves to mark ignored pixels.
    """
    z, _, w, keep = flatten_batch(logits, labels, confidence)
    z, w = z[keep], w[keep]
    logs = log_softmax(z)
    h = -np.exp(logs) * logs
    n = z.shape[0]
    loss = (w[:, None] * h).sum(axis=0) / n
    count = np.full(z.shape[1], n, dtype=np.int64)
    return PerClassLoss(loss, count, np.ones(z.shape[1], dtype=bool))


def per_class_loss(logits, labels, loss_kind: str = "cross_entropy", gamma: float = 2.0,
                   confidence=None) -> PerClassLoss:
    if loss_kind == "cross_entropy":
        return per_class_cross_entropy(logits, labels, confidence)
    if loss_kind == "focal":
        return per_class_focal(logits, labels, gamma, confidence)
    if loss_kind == "entropy":
        return per_class_entropy(logits, labels, confidence)
    raise InvalidInputError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def weighted_total_loss(per_class: PerClassLoss, weights) -> float:
    """``sum_c v_c * loss_c`` over the active classes."""
    v = weights.v if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    if v.shape != per_class.loss.shape:
        raise InvalidInputError(f"weights have {v.size} classes, losses have {per_class.n_classes}")
    mask = per_class.active_mask
    # elementwise product then sum, so all-ones weights reproduce total() bit for bit
    return float(np.sum(v[mask] * per_class.loss[mask]))
