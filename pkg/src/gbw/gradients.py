"""Per-class squared gradient norms taken with respect to the logits.

The norms stand in for full parameter-gradient norms: differentiating each
mean class loss against the pre-activation outputs of the last layer is
cheap, needs no extra backward pass through the model, and stays well
correlated with the true parameter gradients.

Closed forms, for a pixel ``i`` with weight ``w_i``, softmax ``s_i`` and
``n_c`` pixels of class ``c``:

* cross-entropy, ``y_i = c``:  ``w_i (s_i - e_c) / n_c``
* focal, ``y_i = c``, ``p = s_ic``:
  ``w_i [(1-p)^gamma - gamma p (1-p)^(gamma-1) log p] (s_i - e_c) / n_c``
* entropy, every pixel:  ``-(w_i / N) s_ic (log s_ic + 1) (e_c - s_i)``

Cross-entropy and focal gradients of class ``c`` vanish on pixels with any
other label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .losses import LOSS_KINDS, flatten_batch, log_softmax, per_class_loss


@dataclass(frozen=True)
class GradientNorms:
    g: np.ndarray
    active_mask: np.ndarray


def _check_kind(loss_kind):
    if loss_kind not in LOSS_KINDS:
        raise InvalidInputError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def _focal_factor(logp, gamma):
    if gamma == 0:
        return np.ones_like(logp)
    p = np.exp(logp)
    q = -np.expm1(logp)
    pos = q > 0
    q_safe = np.where(pos, q, 1.0)
    # p log p (1-p)^(gamma-1) -> 0 as p -> 1 for every gamma > 0
    correction = np.where(pos, gamma * p * q_safe ** (gamma - 1.0) * logp, 0.0)
    return q ** gamma - correction


def class_logit_jacobian(logits, labels, loss_kind="cross_entropy", gamma=2.0, confidence=None):
    """Gradient of every mean class loss with respect to every logit.

    Returns ``(jac, active_mask)`` with ``jac`` of shape ``(C, N, C)`` over the
    flattened batch; row ``jac[c]`` is ``d loss_c / d z``. Ignored pixels
    get zero rows.
    """
    _check_kind(loss_kind)
    z, y, w, keep = flatten_batch(logits, labels, confidence)
    n, n_classes = z.shape
    logs = log_softmax(z)
    s = np.exp(logs)
    jac = np.zeros((n_classes, n, n_classes))

    if loss_kind == "entropy":
        idx = np.nonzero(keep)[0]
        coef = -(w[idx, None] / idx.size) * s[idx] * (logs[idx] + 1.0)
        block = -coef.T[:, :, None] * s[None, idx, :]
        diag = np.arange(n_classes)
        block[diag, :, diag] += coef.T
        jac[:, idx, :] = block
        return jac, np.ones(n_classes, dtype=bool)

    if y is None:
        raise InvalidInputError(f"{loss_kind} needs a label map")
    idx = np.nonzero(keep)[0]
    yk = y[idx]
    count = np.bincount(yk, minlength=n_classes)
    residual = s[idx].copy()
    residual[np.arange(idx.size), yk] -= 1.0
    factor = w[idx] / count[yk]
    if loss_kind == "focal":
        factor = factor * _focal_factor(logs[idx, yk], float(gamma))
    jac[yk, idx, :] = factor[:, None] * residual
    return jac, count > 0


def weighted_logit_gradient(jac, weights) -> np.ndarray:
    """``sum_c v_c d loss_c / d z`` as an ``(N, C)`` array."""
    v = np.asarray(getattr(weights, "v", weights), dtype=np.float64)
    return np.tensordot(v, jac, axes=1)


def norms_from_jacobian(jac, active_mask) -> GradientNorms:
    g = np.einsum("cij,cij->c", jac, jac)
    g = np.where(active_mask, g, 0.0)
    return GradientNorms(g, np.asarray(active_mask, dtype=bool))


def class_gradient_norms(logits, labels, loss_kind="cross_entropy", gamma=2.0,
                         confidence=None) -> GradientNorms:
    """Squared Frobenius norm of each ``d loss_c / d z`` over the whole batch."""
    jac, active = class_logit_jacobian(logits, labels, loss_kind, gamma, confidence)
    return norms_from_jacobian(jac, active)


def finite_difference_norms(logits, labels, loss_kind="cross_entropy", gamma=2.0,
                            confidence=None, step=1e-5) -> GradientNorms:
    """Central-difference estimate of :func:`class_gradient_norms`.

    Costs two loss evaluations per logit entry; meant for small batches.
    """
    _check_kind(loss_kind)
    step = float(step)
    if not np.isfinite(step) or step <= 0:
        raise InvalidInputError(f"step must be positive, got {step!r}")
    z = np.array(logits, dtype=np.float64)
    flat = z.reshape(-1)

    def losses():
        return per_class_loss(z, labels, loss_kind, gamma, confidence)

    base = losses()
    g = np.zeros(base.n_classes)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = losses().loss
        flat[k] = orig - step
        down = losses().loss
        flat[k] = orig
        g += ((up - down) / (2.0 * step)) ** 2
    g = np.where(base.active_mask, g, 0.0)
    return GradientNorms(g, base.active_mask.copy())
