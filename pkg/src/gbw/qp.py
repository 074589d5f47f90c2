"""Class-weight selection as a small quadratic program.

The weights solve

    minimize    -g^T v + lam * ||v||^2
    subject to  v >= 0,  sum(v) = s

where ``g`` holds per-class squared gradient norms. Completing the square
shows the minimizer is the Euclidean projection of ``g / (2 lam)`` onto the
scaled simplex ``{v >= 0, sum(v) = s}``, which :func:`solve_gbw_qp` computes
in closed form. :func:`oracle_solve_active_set` reaches the same point by
brute-force KKT enumeration and exists only for verification.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, UnsupportedSizeError

MAX_ORACLE_DIM = 15


@dataclass(frozen=True)
class QpProblem:
    g: np.ndarray
    lam: float = 1.0
    target_sum: float | None = None

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64)
        if g.ndim != 1 or g.size < 1:
            raise InvalidInputError("g must be a non-empty vector")
        if not np.all(np.isfinite(g)):
            raise InvalidInputError("g must be finite")
        if np.any(g < 0):
            raise InvalidInputError("g must be non-negative")
        lam = float(self.lam)
        if not np.isfinite(lam) or lam <= 0:
            raise InvalidInputError(f"lambda must be positive, got {self.lam!r}")
        s = float(g.size) if self.target_sum is None else float(self.target_sum)
        if not np.isfinite(s) or s <= 0:
            raise InvalidInputError(f"target_sum must be positive, got {self.target_sum!r}")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "target_sum", s)

    @property
    def n(self) -> int:
        return self.g.size

    def objective(self, v) -> float:
        v = np.asarray(v, dtype=np.float64)
        return float(-self.g @ v + self.lam * (v @ v))


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights.

    ``v`` spans every class; entries outside ``active_mask`` hold the
    neutral weight 1 and did not take part in the solve.
    """

    v: np.ndarray
    active_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        mask = (np.ones(v.shape, dtype=bool) if self.active_mask is None
                else np.asarray(self.active_mask, dtype=bool))
        if mask.shape != v.shape:
            raise InvalidInputError("active_mask must match the weight vector")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "active_mask", mask)

    @property
    def n_classes(self) -> int:
        return self.v.size

    @property
    def n_active(self) -> int:
        return int(self.active_mask.sum())

    @classmethod
    def uniform(cls, n_classes: int) -> "ClassWeights":
        return cls(np.ones(n_classes))


def project_scaled_simplex(x, s: float) -> np.ndarray:
    """Euclidean projection of ``x`` onto ``{v >= 0, sum(v) = s}``.

    Sort-and-threshold: with ``u`` sorted descending, the threshold is
    ``(sum(u[:k]) - s) / k`` for the largest ``k`` such that ``u[k-1]``
    still exceeds it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise InvalidInputError("x must be a non-empty vector")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("x must be finite")
    s = float(s)
    if not np.isfinite(s) or s <= 0:
        raise InvalidInputError(f"s must be positive, got {s!r}")

    order = np.argsort(-x, kind="stable")
    u = x[order]
    thresholds = (np.cumsum(u) - s) / np.arange(1, u.size + 1)
    k = np.nonzero(u - thresholds > 0)[0][-1]
    v = np.maximum(x - thresholds[k], 0.0)
    # the clamp leaves the active entries summing to s up to rounding; put
    # the residual back on them so the equality holds to machine precision
    active = v > 0
    v[active] += (s - v.sum()) / active.sum()
    return v


def solve_gbw_qp(problem: QpProblem) -> ClassWeights:
    """Closed-form minimizer of the regularized weight-selection QP."""
    if not isinstance(problem, QpProblem):
        raise InvalidInputError("expected a QpProblem")
    if not np.any(problem.g):
        return ClassWeights(np.full(problem.n, problem.target_sum / problem.n))
    v = project_scaled_simplex(problem.g / (2.0 * problem.lam), problem.target_sum)
    return ClassWeights(v)


def oracle_solve_active_set(problem: QpProblem, tol: float = 1e-12) -> ClassWeights:
    """Solve the QP by enumerating every candidate zero set.

    For each subset ``Z`` of clamped classes the equality-constrained KKT
    system on the complement is solved directly; the first point that is
    primal feasible (``v >= 0``) and dual feasible (multipliers of the
    clamped classes ``>= 0``) is returned. Cost grows as ``2^C``.
    """
    n = problem.n
    if n > MAX_ORACLE_DIM:
        raise UnsupportedSizeError(f"oracle supports at most {MAX_ORACLE_DIM} classes, got {n}")
    g, lam, s = problem.g, problem.lam, problem.target_sum
    scale = max(1.0, float(np.abs(g).max()) / lam, s)

    for n_zero in range(n):
        for zero in itertools.combinations(range(n), n_zero):
            free = np.setdiff1d(np.arange(n), zero)
            m = free.size
            kkt = np.zeros((m + 1, m + 1))
            kkt[:m, :m] = 2.0 * lam * np.eye(m)
            kkt[:m, m] = 1.0
            kkt[m, :m] = 1.0
            rhs = np.concatenate([g[free], [s]])
            sol = np.linalg.solve(kkt, rhs)
            v_free, mu = sol[:m], sol[m]
            if np.any(v_free < -tol * scale):
                continue
            # stationarity on a clamped class: -g_j + mu - nu_j = 0
            nu = mu - g[list(zero)]
            if np.any(nu < -tol * scale * lam):
                continue
            v = np.zeros(n)
            v[free] = np.maximum(v_free, 0.0)
            return ClassWeights(v)
    raise RuntimeError("no KKT point found")  # unreachable for a strictly convex problem
