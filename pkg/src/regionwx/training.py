"""Forecaster training: pair construction, the MSE train step and lead-time fine-tuning."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, replace

import numpy as np
import torch

from .forecaster import LEAD_TIMES, Forecaster, ForecasterConfig
from .grid import NormStats, boundary_layout, normalize_array
from .store import HOUR, DatasetManifest

log = logging.getLogger(__name__)

DEFAULT_LR = 3e-4
DEFAULT_WEIGHT_DECAY = 1e-5


class TrainingError(RuntimeError):
    pass


def normalize_topography(topo: np.ndarray) -> np.ndarray:
    """Z-score of the static topography field over the grid."""
    topo = np.asarray(topo, dtype=np.float64)
    std = topo.std()
    return (topo - topo.mean()) / (std if std > 0 else 1.0)


@dataclass
class ForecastPairs:
    """In-memory (X_t, B_{t+s}, X_{t+s}) training pairs in normalized space."""

    x: torch.Tensor
    boundary: torch.Tensor
    y: torch.Tensor
    topography: torch.Tensor
    lead: int
    times: list

    def __len__(self):
        return len(self.x)

    def batch(self, idx):
        return self.x[idx], self.boundary[idx], self.y[idx]


def forecast_pairs(manifest: DatasetManifest, stats: NormStats, lead: int, split: str = "train",
                   boundary_width: int = 4, dtype=torch.float32, max_pairs: int | None = None
                   ) -> ForecastPairs:
    times = [t for t in manifest.split(split) if manifest.has(t + lead * HOUR)
             and manifest.splits.assign(t + lead * HOUR) == split]
    if max_pairs is not None:
        times = times[:max_pairs]
    if not times:
        raise TrainingError(f"no {lead}h pairs in split {split!r}")
    x = np.stack([normalize_array(manifest.read("state", t), stats) for t in times])
    y = np.stack([normalize_array(manifest.read("state", t + lead * HOUR), stats) for t in times])
    b = boundary_layout(y, boundary_width)
    topo = normalize_topography(manifest.topography())
    as_t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)  # noqa: E731
    return ForecastPairs(as_t(x), as_t(b), as_t(y), as_t(topo), lead, times)


def make_optimizer(model: torch.nn.Module, lr: float = DEFAULT_LR,
                   weight_decay: float = DEFAULT_WEIGHT_DECAY):
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)


def mse_loss(pred, target):
    return torch.mean((pred - target) ** 2)


def train_step(model: Forecaster, optimizer, x, boundary, y, topography) -> float:
    """One AdamW step on the normalized-space MSE; returns the pre-step loss."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = mse_loss(model(x, boundary, topography), y)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train_forecaster(model: Forecaster, data: ForecastPairs, steps: int, batch_size: int = 4,
                     lr: float = DEFAULT_LR, seed: int = 0, optimizer=None, start_step: int = 0,
                     rng_state=None, callback=None):
    """Run ``steps`` optimisation steps; returns (optimizer, losses, generator).

    Batches are drawn with a seeded generator whose state is returned so a
    resumed run continues the exact same sample sequence.
    """
    if data.lead != model.cfg.lead_hours:
        raise TrainingError(f"pairs are {data.lead}h but the model is tagged {model.cfg.lead_hours}h")
    optimizer = optimizer or make_optimizer(model, lr)
    gen = torch.Generator().manual_seed(seed)
    if rng_state is not None:
        gen.set_state(rng_state)
    losses = []
    n = len(data)
    for step in range(start_step, start_step + steps):
        idx = torch.randperm(n, generator=gen)[: min(batch_size, n)]
        x, b, y = data.batch(idx)
        losses.append(train_step(model, optimizer, x, b, y, data.topography))
        if callback is not None:
            callback(step + 1, losses[-1], optimizer, gen)
    return optimizer, losses, gen


@torch.no_grad()
def evaluate_mse(model: Forecaster, data: ForecastPairs, batch_size: int = 8) -> float:
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(data), batch_size):
        x, b, y = data.batch(slice(i, i + batch_size))
        err = (model(x, b, data.topography) - y) ** 2
        total += float(err.sum())
        count += err.numel()
    return total / count


def finetune_leadtime(base: Forecaster, lead: int, data: ForecastPairs | None, steps: int,
                      batch_size: int = 4, lr: float = DEFAULT_LR, seed: int = 0):
    """Copy a 1-hour model, retag it for ``lead`` hours and train on (t, t+lead) pairs."""
    if lead not in LEAD_TIMES or lead == 1:
        raise TrainingError(f"fine-tuning targets must be one of {LEAD_TIMES[1:]}, got {lead}")
    if base.cfg.lead_hours != 1:
        raise TrainingError("fine-tuning starts from a 1-hour model")
    model = Forecaster(replace(base.cfg, lead_hours=lead))
    model.load_state_dict(copy.deepcopy(base.state_dict()))
    if steps > 0:
        if data is None:
            raise TrainingError("fine-tuning with steps > 0 needs training pairs")
        train_forecaster(model, data, steps, batch_size, lr, seed)
    return model


def build_forecaster(cfg: ForecasterConfig, seed: int = 0, dtype=torch.float32) -> Forecaster:
    torch.manual_seed(seed)
    return Forecaster(cfg).to(dtype)
