"""
Composing lead-time models into a 29-hour forecast
==================================================

Four forecasters step the state by 1, 3, 6 and 24 hours. A longer lead is
reached by chaining them largest-first, with the lateral boundary taken at
each step's target time.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from regionwx.grid import GridSpec, VariableInventory, WeatherState
from regionwx.rollout import StoreBoundaryProvider, greedy_plan, rollout
from regionwx.store import HOUR, compute_stats, generate_synthetic

# %%
# The plan for a few leads
for lead in (1, 5, 29, 47, 120):
    plan = greedy_plan(lead)
    print(f"{lead:4d} h -> {list(plan.steps)}  cumulative {plan.cumulative}")

# %%
# A small synthetic store to roll through
grid = GridSpec.toy()
inventory = VariableInventory.for_grid(grid)
store = generate_synthetic("demo-store", grid, inventory, 48, seed=0, force=True)
stats = compute_stats(store)

# %%
# Stand-in models: persistence nudged toward the boundary mean. Any callable
# taking (x, boundary, topography) in normalized space will do.
def relax(rate):
    def step(x, boundary, topography):
        edge = boundary.mean(dim=(-2, -1), keepdim=True)
        return (1 - rate) * x + rate * edge
    return step

models = {1: relax(0.05), 3: relax(0.14), 6: relax(0.26), 24: relax(0.7)}
t0 = store.timestamps[0]
x0 = WeatherState(store.read("state", t0), t0)
steps = rollout(models, x0, StoreBoundaryProvider(store, stats), 29, stats=stats)
print([s.lead for s in steps])

# %%
# Temperature at each emitted lead against the stored truth
c = inventory.channel_names.index("2mt")
fig, axes = plt.subplots(2, len(steps), figsize=(3 * len(steps), 5))
for k, s in enumerate(steps):
    truth = store.read("state", t0 + s.lead * HOUR)[c]
    axes[0, k].imshow(s.state.values[c], origin="lower")
    axes[0, k].set_title(f"+{s.lead} h")
    axes[1, k].imshow(truth, origin="lower")
for ax in axes.flat:
    ax.set_xticks([])
    ax.set_yticks([])
axes[0, 0].set_ylabel("rollout")
axes[1, 0].set_ylabel("truth")
fig.savefig("greedy_rollout.png", dpi=80)
print("rmse by lead:", [round(float(np.sqrt(np.mean(
    (s.state.values[c] - store.read("state", t0 + s.lead * HOUR)[c]) ** 2))), 3) for s in steps])
