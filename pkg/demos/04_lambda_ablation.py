# %% [markdown]
# # Sweeping the regularization weight
#
# Large lam pins the weights at one, so the run matches the uniform baseline
# exactly. Very small lam lets a single class take all the weight and
# training suffers. Takes about 30 seconds.

# %%
from dataclasses import replace

from gbw.synth import SceneSpec, generate
from gbw.trainer import TrainPlan, run_ablation


def data_for_seed(seed):
    spec = replace(SceneSpec(), seed=seed)
    return generate(spec, 20, "source"), generate(spec, 20, "target")


table = run_ablation(TrainPlan(), [1e-4, 0.01, 0.1, 1.0, 10.0, 1e6], [0, 1, 2], data_for_seed)
print(table.to_csv())

# %% per-cell numbers
print(table.cells_csv())
