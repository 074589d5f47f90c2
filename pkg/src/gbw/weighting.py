"""Per-step class weighting: the gradient-based scheme and static baselines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .gradients import GradientNorms, class_logit_jacobian, norms_from_jacobian
from .losses import LOSS_KINDS, PerClassLoss, per_class_loss, weighted_total_loss
from .qp import ClassWeights, QpProblem, solve_gbw_qp

STRATEGIES = ("gbw", "uniform", "inverse_pixel_frequency", "inverse_image_frequency",
              "loss_based")
STATIC_KINDS = STRATEGIES[1:]


@dataclass(frozen=True)
class GbwConfig:
    lam: float = 1.0
    loss_kind: str = "cross_entropy"
    gamma: float = 2.0
    use_confidence: bool = True
    inactive_class_policy: str = "neutral_one"
    log_weights: bool = True

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise InvalidInputError(f"lambda must be positive, got {self.lam!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidInputError(f"unknown loss kind {self.loss_kind!r}")
        if self.gamma < 0:
            raise InvalidInputError("gamma must be non-negative")
        if self.inactive_class_policy != "neutral_one":
            raise InvalidInputError(
                f"unsupported inactive class policy {self.inactive_class_policy!r}")


@dataclass
class StepRecord:
    step: int
    weights: np.ndarray
    grad_norms: np.ndarray
    losses: np.ndarray
    total: float
    active_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.weights)
        if len(self.grad_norms) != n or len(self.losses) != n:
            raise InvalidInputError("step record fields disagree on the class count")
        if self.active_mask is None:
            self.active_mask = np.ones(n, dtype=bool)


def gbw_weights(norms: GradientNorms, lam: float) -> ClassWeights:
    """Solve the weight QP over the active classes only.

    The active weights sum to the number of active classes; classes absent
    from the batch keep the neutral weight 1.
    """
    active = np.asarray(norms.active_mask, dtype=bool)
    v = np.ones(active.size)
    if active.any():
        sub = solve_gbw_qp(QpProblem(norms.g[active], lam, float(active.sum())))
        v[active] = sub.v
    return ClassWeights(v, active)


def gbw_step(logits, labels, confidence=None, config: GbwConfig = GbwConfig(), step: int = 0):
    """One weighting pass on a forward batch.

    Returns ``(weights, total_loss, record)``. The weights are constants for
    the following backward pass.
    """
    conf = confidence if config.use_confidence else None
    per_class = per_class_loss(logits, labels, config.loss_kind, config.gamma, conf)
    jac, active = class_logit_jacobian(logits, labels, config.loss_kind, config.gamma, conf)
    norms = norms_from_jacobian(jac, active)
    weights = gbw_weights(norms, config.lam)
    total = weighted_total_loss(per_class, weights)
    record = StepRecord(step, weights.v.copy(), norms.g.copy(), per_class.loss.copy(), total,
                        weights.active_mask.copy())
    return weights, total, record


def _normalize(raw, active):
    v = np.ones(raw.size)
    total = raw[active].sum()
    if total > 0:
        v[active] = raw[active] * (active.sum() / total)
    return ClassWeights(v, active)


def static_weight_strategies(stats, kind: str, per_class: PerClassLoss | None = None,
                             active_mask=None) -> ClassWeights:
    """Baseline weights from dataset statistics or current losses.

    ``stats`` needs ``pixel_freq`` and ``image_freq`` arrays. Frequency
    strategies use inverse frequencies, ``loss_based`` is proportional to
    ``per_class.loss``. Weights are normalized to sum to the class count
    over ``active_mask`` (all classes by default); other classes get 1.
    """
    if kind not in STATIC_KINDS:
        raise InvalidInputError(f"unknown static strategy {kind!r}; expected one of {STATIC_KINDS}")
    if kind == "loss_based":
        if per_class is None:
            raise InvalidInputError("loss_based weighting needs the current per-class losses")
        n = per_class.n_classes
    else:
        n = len(stats.pixel_freq)
    active = (np.ones(n, dtype=bool) if active_mask is None
              else np.asarray(active_mask, dtype=bool))
    if active.size != n:
        raise InvalidInputError("active_mask does not match the class count")

    if kind == "uniform":
        return ClassWeights(np.ones(n), active)
    if kind == "loss_based":
        loss = np.asarray(per_class.loss, dtype=np.float64)
        if np.any(loss[active] < 0):
            raise InvalidInputError("loss_based weighting needs non-negative losses")
        return _normalize(loss, active)

    freq = np.asarray(stats.pixel_freq if kind == "inverse_pixel_frequency" else stats.image_freq,
                      dtype=np.float64)
    if np.any(freq[active] <= 0):
        bad = np.nonzero(active & (freq <= 0))[0].tolist()
        raise InvalidInputError(f"zero frequency for classes {bad} under {kind}")
    raw = np.zeros(n)
    raw[active] = 1.0 / freq[active]
    return _normalize(raw, active)
