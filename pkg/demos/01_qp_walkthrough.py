# %% [markdown]
# # The weighting QP, step by step
#
# Given per-class squared gradient norms g, the weights maximize
# g.v - lam*|v|^2 over the scaled simplex {v >= 0, sum v = C}.
# The maximizer is the projection of g / (2 lam) onto that simplex.

# %%
import numpy as np

from gbw.qp import QpProblem, oracle_solve_active_set, project_scaled_simplex, solve_gbw_qp

g = np.array([4.0, 1.0, 0.25, 0.0])

# %% larger lambda flattens the weights toward one; larger g never gets less
for lam in (0.1, 0.5, 1.0, 10.0, 1e6):
    v = solve_gbw_qp(QpProblem(g, lam)).v
    print(f"lam={lam:>9g}  v={np.round(v, 4)}  sum={v.sum():.12f}")

# %% tiny lambda puts all the mass on the dominant class
v = solve_gbw_qp(QpProblem(g, 0.01)).v
print("lam=0.01 ->", v)

# %% the brute-force active-set oracle agrees
p = QpProblem(g, 0.3)
print("closed form:", solve_gbw_qp(p).v)
print("active set: ", oracle_solve_active_set(p).v)

# %% the projection on its own, for a vector that is already feasible
x = np.array([1.5, 0.5, 1.0, 1.0])
print("project feasible point:", project_scaled_simplex(x, 4.0))

# %% only the ratio g / lam matters
print(np.array_equal(solve_gbw_qp(QpProblem(8 * g, 8 * 0.3)).v, solve_gbw_qp(p).v))
