"""Desk-scale domain-adaptation training loop with pluggable class weighting.

Each step draws ``batch_size`` random source pixels and, for the
self-training and entropy regimes, as many target pixels. Source and
coefficient-scaled target per-class losses are added before weighting, so
one weight vector governs both domains. Gradient-based weights come from
the squared norm of the combined per-class logit gradients.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DivergedRunError, EmptyBatchError, InvalidInputError
from .gradients import GradientNorms, class_logit_jacobian, weighted_logit_gradient
from .losses import PerClassLoss, per_class_loss
from .metrics import ConfusionMatrix, accumulate, metrics_dict
from .model import MicroModel, SgdConfig, backward_and_step, forward, pseudo_label
from .qp import ClassWeights
from .seeding import stream
from .synth import dataset_class_statistics
from .weighting import STRATEGIES, GbwConfig, StepRecord, gbw_weights, static_weight_strategies

log = logging.getLogger(__name__)

REGIMES = ("source_only", "self_training", "entropy_min")


@dataclass(frozen=True)
class TrainPlan:
    strategy: str = "gbw"
    regime: str = "self_training"
    gbw: GbwConfig = field(default_factory=GbwConfig)
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(learning_rate=0.02, steps=3000,
                                                             batch_size=64))
    target_coefficient: float = 1.0
    hidden: int = 0
    pseudo_label_threshold: float = 0.8
    eval_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidInputError(f"strategy: unknown {self.strategy!r}, expected one of {STRATEGIES}")
        if self.regime not in REGIMES:
            raise InvalidInputError(f"regime: unknown {self.regime!r}, expected one of {REGIMES}")
        if self.gbw.loss_kind == "entropy":
            raise InvalidInputError("gbw.loss_kind: the supervised loss cannot be entropy")
        if not (math.isfinite(self.target_coefficient) and self.target_coefficient >= 0):
            raise InvalidInputError("target_coefficient: must be finite and non-negative")
        if not 0.0 < self.eval_fraction < 1.0:
            raise InvalidInputError("eval_fraction: must lie in (0, 1)")
        if not 0.0 <= self.pseudo_label_threshold <= 1.0:
            raise InvalidInputError("pseudo_label_threshold: must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        d = dict(d)
        if "gbw" in d:
            d["gbw"] = GbwConfig(**d["gbw"])
        if "sgd" in d:
            d["sgd"] = SgdConfig(**d["sgd"])
        return cls(**d)


@dataclass
class ExperimentRecord:
    plan: dict
    n_classes: int
    steps: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    status: str = "ok"
    diverged_step: int | None = None

    def weight_matrix(self) -> np.ndarray:
        return np.array([r.weights for r in self.steps]).reshape(-1, self.n_classes)

    def to_dict(self) -> dict:
        return {
            "plan": self.plan,
            "n_classes": self.n_classes,
            "status": self.status,
            "diverged_step": self.diverged_step,
            "metrics": self.metrics,
            "n_steps": len(self.steps),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def steps_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "class", "weight", "grad_norm", "loss", "active", "total"])
        for r in self.steps:
            for c in range(self.n_classes):
                writer.writerow([r.step, c, repr(float(r.weights[c])), repr(float(r.grad_norms[c])),
                                 repr(float(r.losses[c])), int(r.active_mask[c]), repr(float(r.total))])
        return buf.getvalue()


def split_target(target_data, eval_fraction: float):
    """Split target images into (unlabelled train, labelled held-out eval)."""
    n = len(target_data)
    n_eval = max(1, int(round(eval_fraction * n)))
    if n - n_eval < 1:
        raise InvalidInputError("target dataset too small to split off an evaluation set")
    train = [s.without_labels() for s in target_data[:n - n_eval]]
    return train, list(target_data[n - n_eval:])


def _pool(samples, with_labels=True):
    x = np.concatenate([s.features.reshape(-1, s.features.shape[-1]) for s in samples])
    if not with_labels:
        return x, None
    y = np.concatenate([s.labels.reshape(-1) for s in samples])
    return x, y


def evaluate(model: MicroModel, samples) -> dict:
    cm = ConfusionMatrix.empty(model.n_classes)
    for s in samples:
        accumulate(cm, forward(model, s.features).argmax(axis=-1), s.labels)
    return metrics_dict(cm)


def _domain_terms(model, x, labels, kind, gamma, confidence, step):
    with np.errstate(over="ignore", invalid="ignore"):
        z = forward(model, x)
    if not np.all(np.isfinite(z)):
        raise DivergedRunError(step)
    try:
        pc = per_class_loss(z, labels, kind, gamma, confidence)
    except EmptyBatchError:
        return None
    jac, active = class_logit_jacobian(z, labels, kind, gamma, confidence)
    return pc, jac, active


def train(plan: TrainPlan, source_data, target_data=None):
    """Run the SGD loop; returns ``(model, ExperimentRecord)``.

    Raises :class:`DivergedRunError` if a loss or parameter turns non-finite.
    Target labels are only read for the held-out evaluation split.
    """
    if not source_data:
        raise InvalidInputError("empty source dataset")
    if not target_data:
        raise InvalidInputError("empty target dataset")
    n_features = source_data[0].features.shape[-1]
    n_classes = int(max(s.labels.max() for s in source_data)) + 1
    stats = dataset_class_statistics(source_data, n_classes)
    target_train, target_eval = split_target(target_data, plan.eval_fraction)

    xs, ys = _pool(source_data)
    xt, _ = _pool(target_train, with_labels=False)

    model = MicroModel(n_features, n_classes, plan.hidden, plan.seed)
    rng = stream(plan.seed, "batching")
    cfg = plan.gbw
    beta = plan.target_coefficient
    use_target = plan.regime != "source_only" and beta > 0
    record = ExperimentRecord(plan.to_dict(), n_classes)
    m = plan.sgd.batch_size

    for step in range(plan.sgd.steps):
        idx_s = rng.integers(0, xs.shape[0], m)
        bx = [xs[idx_s]]
        src = _domain_terms(model, bx[0], ys[idx_s], cfg.loss_kind, cfg.gamma, None, step)
        loss = src[0].loss.copy()
        active = src[2].copy()
        jac_s = src[1]
        sq = np.einsum("cij,cij->c", jac_s, jac_s)
        jac_t = None

        if use_target:
            idx_t = rng.integers(0, xt.shape[0], m)
            xtb = xt[idx_t]
            if plan.regime == "self_training":
                labels_t, conf = pseudo_label(model, xtb, plan.pseudo_label_threshold)
                tgt = _domain_terms(model, xtb, labels_t, cfg.loss_kind, cfg.gamma,
                                    conf if cfg.use_confidence else None, step)
            else:
                tgt = _domain_terms(model, xtb, None, "entropy", cfg.gamma, None, step)
            if tgt is not None:
                pc_t, jac_t, active_t = tgt
                loss = loss + beta * pc_t.loss
                active |= active_t
                sq = sq + beta ** 2 * np.einsum("cij,cij->c", jac_t, jac_t)
                bx.append(xtb)

        g = np.where(active, sq, 0.0)
        combined = PerClassLoss(loss, np.zeros(n_classes, dtype=np.int64), active)
        if plan.strategy == "gbw":
            weights = gbw_weights(GradientNorms(g, active), cfg.lam)
        elif plan.strategy == "uniform":
            weights = ClassWeights(np.ones(n_classes), active)
        elif plan.strategy == "loss_based":
            weights = static_weight_strategies(stats, "loss_based", combined, active)
        else:
            weights = static_weight_strategies(stats, plan.strategy)

        total = float(np.sum(weights.v[active] * loss[active]))
        if not math.isfinite(total):
            raise DivergedRunError(step)
        record.steps.append(StepRecord(step, weights.v.copy(), g, loss, total, active.copy()))

        upstream = [weighted_logit_gradient(jac_s, weights)]
        if jac_t is not None:
            upstream.append(beta * weighted_logit_gradient(jac_t, weights))
        backward_and_step(model, np.concatenate(bx), np.concatenate(upstream), plan.sgd)
        if not all(np.all(np.isfinite(p)) for p in model.params):
            raise DivergedRunError(step)

    record.metrics = evaluate(model, target_eval)
    log.info("run finished: strategy=%s lam=%g seed=%d miou=%.4f", plan.strategy, cfg.lam,
             plan.seed, record.metrics["miou"])
    return model, record


def _ablation_cell(args):
    plan, source_data, target_data = args
    try:
        _, record = train(plan, source_data, target_data)
        return record.metrics["miou"], record.metrics["recall"], "ok"
    except DivergedRunError as exc:
        return float("nan"), None, f"diverged at step {exc.step}"


@dataclass
class AblationTable:
    lambdas: list
    seeds: list
    cells: list  # dicts: lam (None = uniform baseline), seed, miou, status

    def mean_miou(self, lam) -> float:
        vals = [c["miou"] for c in self.cells if c["lam"] == lam]
        return float(np.mean(vals))

    def gain(self, lam) -> float:
        return self.mean_miou(lam) - self.mean_miou(None)

    def to_csv(self) -> str:
        """Wide table: lambda columns, an mIoU row and a gain row (points)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["lambda", "-"] + [repr(float(lam)) for lam in self.lambdas])
        base = self.mean_miou(None)
        writer.writerow(["mIoU", f"{100 * base:.2f}"]
                        + [f"{100 * self.mean_miou(lam):.2f}" for lam in self.lambdas])
        writer.writerow(["Gain", "-"] + [f"{100 * self.gain(lam):.2f}" for lam in self.lambdas])
        return buf.getvalue()

    def cells_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["lambda", "seed", "miou", "status"])
        for c in self.cells:
            lam = "-" if c["lam"] is None else repr(float(c["lam"]))
            writer.writerow([lam, c["seed"], repr(float(c["miou"])), c["status"]])
        return buf.getvalue()


def run_ablation(plan_template: TrainPlan, lambda_grid, seeds, data_for_seed, workers: int = 1):
    """Train a uniform baseline and one GBW run per lambda for every seed.

    ``data_for_seed(seed)`` returns ``(source_data, target_data)``. Diverged
    runs are recorded with NaN mIoU instead of raising.
    """
    lambda_grid = [float(lam) for lam in lambda_grid]
    if not lambda_grid:
        raise InvalidInputError("lambda grid is empty")
    if any(not lam > 0 for lam in lambda_grid):
        raise InvalidInputError("lambda grid entries must be positive")
    jobs, keys = [], []
    for seed in seeds:
        source, target = data_for_seed(seed)
        base = replace(plan_template, seed=seed)
        jobs.append((replace(base, strategy="uniform"), source, target))
        keys.append((None, seed))
        for lam in lambda_grid:
            jobs.append((replace(base, strategy="gbw", gbw=replace(base.gbw, lam=lam)), source,
                         target))
            keys.append((lam, seed))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_ablation_cell, jobs))
    else:
        results = [_ablation_cell(j) for j in jobs]
    cells = [{"lam": lam, "seed": seed, "miou": r[0], "recall": r[1], "status": r[2]}
             for (lam, seed), r in zip(keys, results)]
    return AblationTable(lambda_grid, list(seeds), cells)
