"""
Training the toy forecaster and fine-tuning a 3-hour model
==========================================================

The 1-hour model learns from consecutive pairs of a synthetic store. Its
weights seed the 3-hour model, which is then trained on 3-hour pairs.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from regionwx.forecaster import count_parameters, toy_config
from regionwx.grid import GridSpec, VariableInventory
from regionwx.store import compute_stats, generate_synthetic
from regionwx.training import (
                               build_forecaster,
                               evaluate_mse,
                               finetune_leadtime,
                               forecast_pairs,
                               train_forecaster,
)

grid = GridSpec.toy()
inv = VariableInventory.for_grid(grid)
store = generate_synthetic("demo-train", grid, inv, 72, seed=2, force=True)
stats = compute_stats(store)

cfg = toy_config(n_surface=inv.n_surface, n_pressure_vars=len(inv.pressure_vars), n_levels=inv.n_levels)
model = build_forecaster(cfg, seed=0)
print(count_parameters(model), "parameters")

train1, val1 = forecast_pairs(store, stats, 1, "train"), forecast_pairs(store, stats, 1, "val")
_, losses, _ = train_forecaster(model, train1, 400, batch_size=4)
print("1 h validation MSE", evaluate_mse(model, val1))

# %%
train3, val3 = forecast_pairs(store, stats, 3, "train"), forecast_pairs(store, stats, 3, "val")
print("1 h weights on 3 h pairs", evaluate_mse(model, val3))
tuned = finetune_leadtime(model, 3, train3, 150)
print("after fine-tuning      ", evaluate_mse(tuned, val3))

# %%
smooth = np.convolve(losses, np.ones(25) / 25, mode="valid")
fig, ax = plt.subplots(figsize=(5, 3))
ax.semilogy(losses, alpha=0.3)
ax.semilogy(np.arange(len(smooth)) + 12, smooth)
ax.set_xlabel("step")
ax.set_ylabel("train MSE")
fig.savefig("forecaster_loss.png", dpi=80)
