"""Run configuration: built-in defaults, a YAML/JSON file, then flag overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import yaml

from .codecs import CodecSpec, full_scale_specs, toy_specs
from .diffusion import DiTConfig
from .forecaster import ForecasterConfig, toy_config
from .grid import GridSpec, VariableInventory
from .store import precip_grid_for


class ConfigError(ValueError):
    pass


# Defaults are the toy profile; ``profile: full`` switches grid and model
# shapes to the full-scale setup.
DEFAULTS: dict = {
    "profile": "toy",
    "seed": 0,
    "paths": {"workdir": "regionwx-run"},
    "grid": {"n_lat": 24, "n_lon": 32, "resolution": 1.0, "lat_start": 20.0,
             "lon_start": 100.0, "pressure_levels": [500, 850]},
    "data": {"hours": 72, "years": [2019, 2020, 2021], "precip_crop_lat": 26.0,
             "precip_factor": 5, "chunk_hours": 24},
    "forecaster": {"embed_dim": 16, "depths": [2, 2, 2], "heads": [2, 2, 2],
                   "window": [2, 3, 3], "patch": 2, "mlp_ratio": 2.0, "sliding": True,
                   "boundary_width": 4},
    "train": {"steps": 600, "batch_size": 4, "lr": 3e-4, "checkpoint_every": 100},
    "finetune": {"steps": 100, "leads": [3, 6, 24]},
    "vae": {"steps": 150, "batch_size": 8, "lr": 1e-3, "latent": 8, "disc_start": 100,
            "perceptual": 0.1, "kl": 1e-6, "checkpoint_every": 50},
    "dit": {"steps": 300, "batch_size": 16, "lr": 3e-4, "width": 64, "depth": 2, "heads": 4,
            "patch": 2, "T": 1000, "checkpoint_every": 100},
    "diagnose": {"members": 3, "sample_steps": 50},
    "evaluate": {"leads": None, "variables": None, "thresholds": [0.1, 1.0, 5.0, 10.0],
                 "normalize_weights": False, "acc_mode": "climatology"},
}


def deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = deep_merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(item: str) -> dict:
    """``a.b=value`` -> {"a": {"b": value}}; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def load_config(path=None, overrides=()) -> dict:
    """Resolve defaults < file < overrides and validate the result."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path} must hold a mapping")
        cfg = deep_merge(cfg, doc)
    for item in overrides:
        cfg = deep_merge(cfg, item if isinstance(item, dict) else parse_override(item))
    validate(cfg)
    return cfg


def validate(cfg: dict):
    if cfg["profile"] not in ("toy", "full"):
        raise ConfigError("profile must be 'toy' or 'full'")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for section in ("train", "finetune", "vae", "dit"):
        steps = cfg[section]["steps"]
        if not isinstance(steps, int) or steps < 0:
            raise ConfigError(f"{section}.steps must be a non-negative integer")
    for section in ("train", "vae", "dit"):
        if not cfg[section]["lr"] > 0:
            raise ConfigError(f"{section}.lr must be positive")
        if not cfg[section]["batch_size"] >= 1:
            raise ConfigError(f"{section}.batch_size must be >= 1")
    if cfg["data"]["hours"] < 30:
        raise ConfigError("data.hours must be at least 30 (a 29 h forecast plus its init)")
    if cfg["diagnose"]["members"] < 1:
        raise ConfigError("diagnose.members must be >= 1")
    if cfg["evaluate"]["acc_mode"] not in ("climatology", "field_mean"):
        raise ConfigError("evaluate.acc_mode must be 'climatology' or 'field_mean'")
    try:
        grid_of(cfg)
        forecaster_config(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def dump(cfg: dict, path):
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True))


def grid_of(cfg: dict) -> GridSpec:
    if cfg["profile"] == "full":
        return GridSpec.full()
    g = cfg["grid"]
    return GridSpec.toy(g["n_lat"], g["n_lon"], g["resolution"], g["lat_start"], g["lon_start"],
                        tuple(g["pressure_levels"]))


def inventory_of(cfg: dict) -> VariableInventory:
    return VariableInventory.for_grid(grid_of(cfg))


def forecaster_config(cfg: dict, lead: int = 1) -> ForecasterConfig:
    inv = inventory_of(cfg)
    f = cfg["forecaster"]
    if cfg["profile"] == "full":
        return ForecasterConfig(lead_hours=lead)
    return toy_config(n_surface=inv.n_surface, n_pressure_vars=len(inv.pressure_vars),
                      n_levels=inv.n_levels, embed_dim=f["embed_dim"], sliding=f["sliding"],
                      depths=tuple(f["depths"]), heads=tuple(f["heads"]),
                      window=tuple(f["window"]), patch=f["patch"], mlp_ratio=f["mlp_ratio"],
                      lead_hours=lead, boundary_width=f["boundary_width"])


def codec_specs(cfg: dict) -> dict[str, CodecSpec]:
    if cfg["profile"] == "full":
        return full_scale_specs()
    grid = grid_of(cfg)
    crop_lat, k = cfg["data"]["precip_crop_lat"], cfg["data"]["precip_factor"]
    return toy_specs(inventory_of(cfg).n_channels, grid.crop_lat(crop_lat).shape,
                     precip_grid_for(grid, crop_lat, k).shape, cfg["vae"]["latent"])


def dit_config(cfg: dict) -> DiTConfig:
    specs = codec_specs(cfg)
    cond = sum(specs[k].latent_channels for k in ("V_x", "V_p", "V_cmpas"))
    target = specs["V_cmpas"]
    if cfg["profile"] == "full":
        return DiTConfig(latent_channels=target.latent_channels, cond_channels=cond,
                         input_size=target.latent_size)
    d = cfg["dit"]
    return DiTConfig(latent_channels=target.latent_channels, cond_channels=cond,
                     input_size=target.latent_size, patch=d["patch"], width=d["width"],
                     depth=d["depth"], heads=d["heads"], mlp_ratio=4.0, freq_dim=64)
