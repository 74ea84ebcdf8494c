"""Precipitation diagnosis: codec preprocessing, frozen-codec DiT training and EnMax diagnosis."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .codecs import Codec
from .diffusion import DiT, NoiseSchedule, diffusion_train_step, enmax, sample
from .grid import GridSpec, NormStats, dbz_to_precip, normalize_array, precip_to_dbz
from .store import HOUR, DatasetManifest, StoreWriter, crop_to_precip_region, format_time


class DiagnosisError(RuntimeError):
    pass


def state_input(values, stats: NormStats, grid: GridSpec, crop_lat: float) -> np.ndarray:
    """Normalized, cropped state for V_x: [C, H, W] physical -> [C, Hc, W]."""
    return crop_to_precip_region(normalize_array(np.asarray(values, dtype=np.float64), stats),
                                 grid, crop_lat)


def precip_input(rate, stats: NormStats, key: str) -> np.ndarray:
    """mm/h -> normalized dBZ with the split's dBZ statistics, [1, H, W]."""
    mean, std = stats.precip_stats(key)
    return ((precip_to_dbz(rate) - mean) / std)[None]


def precip_output(normalized_dbz, stats: NormStats, key: str = "cmpas") -> np.ndarray:
    mean, std = stats.precip_stats(key)
    return np.maximum(dbz_to_precip(np.asarray(normalized_dbz, dtype=np.float64) * std + mean), 0.0)


def codec_inputs(manifest: DatasetManifest, stats: NormStats, codec_id: str, split: str = "train"
                 ) -> torch.Tensor:
    """Stacked, preprocessed training inputs for one codec."""
    crop = manifest.precip_crop_lat
    out = []
    for t in manifest.split(split):
        if codec_id == "V_x":
            out.append(state_input(manifest.read("state", t), stats, manifest.grid, crop))
        elif codec_id == "V_p":
            out.append(crop_to_precip_region(precip_input(manifest.read("tp", t), stats, "tp"),
                                              manifest.grid, crop))
        elif codec_id == "V_cmpas":
            out.append(precip_input(manifest.read("cmpas", t), stats, "cmpas"))
        else:
            raise DiagnosisError(f"unknown codec {codec_id!r}")
    if not out:
        raise DiagnosisError(f"split {split!r} is empty")
    return torch.as_tensor(np.stack(out), dtype=torch.float32)


def parameter_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


@dataclass
class LatentEncoder:
    """Frozen codecs plus per-codec latent scale factors."""

    codecs: dict
    scales: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in ("V_x", "V_p", "V_cmpas"):
            if key not in self.codecs:
                raise DiagnosisError(f"missing codec {key}")
            freeze(self.codecs[key])

    @torch.no_grad()
    def latent(self, codec_id: str, x: torch.Tensor) -> torch.Tensor:
        block = self.codecs[codec_id].encode(x, eps=None, generator=torch.Generator().manual_seed(0))
        return block.mean * self.scales.get(codec_id, 1.0)

    def fit_scales(self, inputs: dict):
        for key, x in inputs.items():
            self.scales[key] = 1.0
            std = float(self.latent(key, x).std())
            self.scales[key] = 1.0 / std if std > 0 else 1.0
        return self.scales

    def condition(self, x_state, x_tp, x_prev) -> torch.Tensor:
        return torch.cat([self.latent("V_x", x_state), self.latent("V_p", x_tp),
                          self.latent("V_cmpas", x_prev)], dim=1)

    @torch.no_grad()
    def decode_target(self, z: torch.Tensor) -> torch.Tensor:
        return self.codecs["V_cmpas"].decode(z / self.scales.get("V_cmpas", 1.0))


def diffusion_dataset(manifest: DatasetManifest, stats: NormStats, encoder: LatentEncoder,
                      split: str = "train", batch: int = 32):
    """Conditioning latents and target latents for every t with P_{t-1} available."""
    crop = manifest.precip_crop_lat
    times = [t for t in manifest.split(split) if manifest.has(t - HOUR)]
    if not times:
        raise DiagnosisError(f"no diagnosis samples in split {split!r}")
    conds, targets = [], []
    for i in range(0, len(times), batch):
        chunk = times[i:i + batch]
        xs = np.stack([state_input(manifest.read("state", t), stats, manifest.grid, crop) for t in chunk])
        tp = np.stack([crop_to_precip_region(precip_input(manifest.read("tp", t), stats, "tp"),
                                             manifest.grid, crop) for t in chunk])
        prev = np.stack([precip_input(manifest.read("cmpas", t - HOUR), stats, "cmpas") for t in chunk])
        cur = np.stack([precip_input(manifest.read("cmpas", t), stats, "cmpas") for t in chunk])
        f = lambda a: torch.as_tensor(a, dtype=torch.float32)  # noqa: E731
        conds.append(encoder.condition(f(xs), f(tp), f(prev)))
        targets.append(encoder.latent("V_cmpas", f(cur)))
    return torch.cat(conds), torch.cat(targets), times


def train_dit(model: DiT, schedule: NoiseSchedule, cond: torch.Tensor, target: torch.Tensor,
              steps: int, batch_size: int = 16, lr: float = 3e-4, seed: int = 0, optimizer=None,
              generator=None, callback=None):
    """AdamW on the hybrid loss; returns (optimizer, losses, generator)."""
    optimizer = optimizer or torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    gen = generator or torch.Generator().manual_seed(seed)
    losses = []
    n = len(target)
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        parts = diffusion_train_step(model, optimizer, schedule, target[idx], cond[idx], gen)
        losses.append(parts["loss"])
        if callback is not None:
            callback(step + 1, parts, optimizer, gen)
    return optimizer, losses, gen


@dataclass
class PrecipDiagnoser:
    encoder: LatentEncoder
    model: DiT
    schedule: NoiseSchedule
    stats: NormStats
    grid: GridSpec
    crop_lat: float

    def condition(self, state, tp, prev) -> torch.Tensor:
        f = lambda a: torch.as_tensor(a, dtype=torch.float32)[None]  # noqa: E731
        try:
            xs = state_input(state, self.stats, self.grid, self.crop_lat)
            xp = crop_to_precip_region(precip_input(tp, self.stats, "tp"), self.grid, self.crop_lat)
            xc = precip_input(prev, self.stats, "cmpas")
            return self.encoder.condition(f(xs), f(xp), f(xc))
        except Exception as exc:
            raise DiagnosisError(f"encode stage failed: {exc}") from exc

    def members(self, state, tp, prev, n_members: int = 3, seed: int = 0, n_steps: int = 250):
        """Decoded mm/h fields, one per ensemble member."""
        if n_members < 1:
            raise DiagnosisError("need at least one ensemble member")
        cond = self.condition(state, tp, prev)
        out = []
        for k in range(n_members):
            try:
                z = sample(self.model, self.schedule, cond, n_steps, seed, member=k)
            except Exception as exc:
                raise DiagnosisError(f"sampling stage failed (member {k}): {exc}") from exc
            try:
                field_ = self.encoder.decode_target(z)[0, 0].numpy()
                out.append(precip_output(field_, self.stats, "cmpas"))
            except Exception as exc:
                raise DiagnosisError(f"decode stage failed (member {k}): {exc}") from exc
        return out

    def diagnose(self, state, tp, prev, n_members: int = 3, seed: int = 0, n_steps: int = 250):
        """EnMax-combined precipitation (mm/h) on the high-resolution grid."""
        return enmax(self.members(state, tp, prev, n_members, seed, n_steps))


def build_codec(spec, seed: int = 0) -> Codec:
    torch.manual_seed(seed)
    return Codec(spec)


def write_diagnosis(root, source: DatasetManifest, when, field_, members=None, seed: int = 0,
                    n_steps: int = 250, force: bool = False) -> DatasetManifest:
    """Persist a diagnosed field as a one-hour ``cmpas`` store tagged with its provenance."""
    n_members = len(members) if members is not None else 1
    writer = StoreWriter(root, source.grid, source.inventory, source.precip_grid,
                         source.precip_crop_lat, tags={"kind": "diagnosis", "time": format_time(when),
                                                       "seed": seed, "n_members": n_members,
                                                       "n_steps": n_steps, "combine": "enmax"},
                         force=force)
    writer.append_run(when, cmpas=np.asarray(field_, dtype="<f4")[None])
    if members is not None:
        np.save(writer.root / "members.npy", np.stack(members).astype("<f4"))
    return writer.finalize()
