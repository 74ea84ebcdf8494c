"""Greedy composition of the 1/3/6/24-hour forecasters into longer forecasts."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime

import numpy as np
import torch

from .grid import (
    BoundaryStrip,
    GridSpec,
    NormStats,
    VariableInventory,
    WeatherState,
    boundary_layout,
    denormalize_array,
    normalize_array,
)
from .store import HOUR, DatasetManifest, StoreWriter, format_time

STEP_SIZES = (24, 6, 3, 1)
MAX_LEAD = 120


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class RolloutPlan:
    lead: int
    steps: tuple[int, ...]

    @property
    def cumulative(self) -> list[int]:
        return [int(v) for v in np.cumsum(self.steps)]


def greedy_plan(lead: int, max_lead: int = MAX_LEAD) -> RolloutPlan:
    """Largest-step-first decomposition of ``lead`` hours."""
    if not 1 <= lead <= max_lead:
        raise RolloutError(f"lead time must be in [1, {max_lead}], got {lead}")
    steps, remaining = [], lead
    for size in STEP_SIZES:
        while remaining >= size:
            steps.append(size)
            remaining -= size
    return RolloutPlan(lead, tuple(steps))


class StoreBoundaryProvider:
    """Normalized boundary strips taken from a (reanalysis) store."""

    def __init__(self, manifest: DatasetManifest, stats: NormStats | None, width: int = 4):
        self.manifest, self.stats, self.width = manifest, stats, width

    def __call__(self, when: datetime) -> BoundaryStrip:
        values = self.manifest.read("state", when)
        if self.stats is not None:
            values = normalize_array(values, self.stats)
        n_lat, n_lon = values.shape[-2:]
        return BoundaryStrip(boundary_layout(values, self.width), self.width, n_lat, n_lon, when)


@dataclass(frozen=True)
class ForecastStep:
    lead: int
    state: WeatherState


def _as_model_input(a: np.ndarray, dtype) -> torch.Tensor:
    return torch.as_tensor(np.array(a), dtype=dtype)[None]


def rollout(models, x0: WeatherState, boundary_provider, lead: int, stats: NormStats | None = None,
            topography=None, dtype=torch.float32) -> list[ForecastStep]:
    """Iterate the lead-time models along ``greedy_plan(lead)``.

    ``models`` maps step hours to callables ``f(x, boundary, topography)``
    acting on [1, C, H, W] tensors in normalized space. When ``stats`` is
    given, ``x0`` is physical and emitted states are denormalized; chaining
    always stays in normalized space. Each step receives the boundary strip
    valid at that step's target time.
    """
    plan = greedy_plan(lead)
    missing = sorted(set(plan.steps) - set(models))
    if missing:
        raise RolloutError(f"no model for step sizes {missing}")
    if stats is not None:
        if x0.normalized:
            raise RolloutError("x0 must be physical when stats are supplied")
        x = normalize_array(x0.values, stats)
    else:
        x = np.asarray(x0.values)
    topo = None if topography is None else torch.as_tensor(topography, dtype=dtype)
    xt = _as_model_input(x, dtype)
    out, elapsed = [], 0
    for step in plan.steps:
        elapsed += step
        when = x0.timestamp + elapsed * HOUR
        try:
            strip = boundary_provider(when)
        except Exception as exc:
            raise RolloutError(f"boundary provider failed for {format_time(when)}: {exc}") from exc
        b = None if strip is None else _as_model_input(strip.values, dtype)
        model = models[step]
        if isinstance(model, torch.nn.Module):
            model.eval()
        with torch.no_grad():
            xt = model(xt, b, topo)
        values = xt[0].detach().cpu().numpy().astype(np.float64)
        if stats is not None:
            out.append(ForecastStep(elapsed, WeatherState(denormalize_array(values, stats), when)))
        else:
            out.append(ForecastStep(elapsed, WeatherState(values, when, normalized=x0.normalized)))
    return out


def write_forecast_archive(root, grid: GridSpec, inventory: VariableInventory, init: datetime,
                           plan: RolloutPlan, steps: list[ForecastStep], force: bool = False):
    """Persist a rollout in the store layout, one run per contiguous block of leads."""
    writer = StoreWriter(root, grid, inventory, chunk_hours=24, force=force,
                         tags={"kind": "forecast", "init": format_time(init),
                               "plan": list(plan.steps), "leads": [s.lead for s in steps]})
    block: list[ForecastStep] = []
    for s in steps:
        if block and s.lead != block[-1].lead + 1:
            writer.append_run(block[0].state.timestamp, state=np.stack([b.state.values for b in block]))
            block = []
        block.append(s)
    if block:
        writer.append_run(block[0].state.timestamp, state=np.stack([b.state.values for b in block]))
    return writer.finalize()
