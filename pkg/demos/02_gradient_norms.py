# %% [markdown]
# # Per-class gradient norms at the logits
#
# Each class loss is a mean over the pixels of that class. Its gradient with
# respect to the logits is cheap in closed form. The squared norm is what
# the weighting QP consumes.

# %%
import numpy as np

from gbw.gradients import class_gradient_norms, finite_difference_norms
from gbw.weighting import GbwConfig, gbw_step

rng = np.random.default_rng(0)
n, c = 40, 4
y = rng.choice(c, n, p=[0.6, 0.25, 0.1, 0.05])
z = rng.normal(size=(n, c))
z[np.arange(n), y] += 1.5  # the model is somewhat right
print("pixels per class:", np.bincount(y, minlength=c))

# %% analytic against central differences
for kind in ("cross_entropy", "focal", "entropy"):
    labels = None if kind == "entropy" else y
    a = class_gradient_norms(z, labels, kind).g
    fd = finite_difference_norms(z, labels, kind).g
    print(f"{kind:>13}: {np.round(a, 5)}  max rel err {np.max(np.abs(a - fd) / fd):.1e}")

# %% rare classes have fewer pixels to average over, so larger norms
w, total, rec = gbw_step(z, y)
print("g:", np.round(rec.grad_norms, 4))
print("v:", np.round(w.v, 4), "weighted loss", round(total, 4))

# %% confidence down-weights uncertain pixels (pseudo-labels on target data)
p = rng.uniform(0.2, 1.0, n)
_, _, rec_p = gbw_step(z, y, p, GbwConfig())
print("g with confidence:", np.round(rec_p.grad_norms, 4))
