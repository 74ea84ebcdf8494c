"""
Scoring forecasts: weighted RMSE, ACC and rain contingency scores
=================================================================

A damped-persistence forecast is verified against a synthetic store. RMSE
and ACC are cos(latitude) weighted; rain is scored by threshold hit rates.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from regionwx.grid import GridSpec, VariableInventory, build_climatology
from regionwx.metrics import (
    contingency,
    evaluate_precipitation,
    far,
    lat_weights,
    pod,
    ts,
    weighted_acc,
    weighted_rmse,
)
from regionwx.store import HOUR, generate_synthetic

grid = GridSpec.toy()
inv = VariableInventory.for_grid(grid)
store = generate_synthetic("demo-verify", grid, inv, 72, seed=5, precip_crop_lat=26.0, force=True)
names = inv.channel_names

# climatology from the whole store; the toy run only covers one month
samples = ((t, store.read("state", t)) for t in store.timestamps)
clim = build_climatology(samples, names, strict=False)
w = lat_weights(grid.latitudes)

# %%
# Persistence: the init state reused for every lead
t0 = store.split("test")[0]
init = store.read("state", t0)
c = names.index("2mt")
leads = list(range(1, 25))
rmse, acc = [], []
for lead in leads:
    when = t0 + lead * HOUR
    obs = store.read("state", when)
    rmse.append(weighted_rmse(init[c], obs[c], w))
    acc.append(weighted_acc(init[c], obs[c], clim.lookup(when)[c], w))

fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
a1.plot(leads, rmse, marker=".")
a1.set_title("2mt RMSE (K)")
a2.plot(leads, acc, marker=".")
a2.set_title("2mt ACC")
a2.set_xlabel("lead (h)")
fig.tight_layout()
fig.savefig("persistence_scores.png", dpi=80)

# %%
# Rain: persistence of the high-resolution analysis one hour back
pairs = [(store.read("cmpas", t - HOUR), store.read("cmpas", t)) for t in store.split("test")[1:]]
for row in evaluate_precipitation(pairs):
    if row.metric.startswith("ts"):
        print(f"{row.metric:8s} {row.value if row.value is None else round(row.value, 3)}")

counts = contingency(*pairs[0], 1.0)
print(counts, "TS", ts(counts), "POD", pod(counts), "FAR", far(counts))
