"""Versioned checkpoint container shared by the forecaster, codecs and denoiser."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, kind: str, config: dict, model: torch.nn.Module,
                    optimizer=None, metadata=None, arch: dict | None = None):
    """Write a checkpoint; ``arch`` (default: ``config``) determines the fingerprint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "regionwx.checkpoint",
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "fingerprint": fingerprint(arch if arch is not None else config),
        "params": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "metadata": dict(metadata or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "regionwx.checkpoint":
        raise CheckpointError(f"{path} is not a checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"{path} holds a {payload['kind']!r} checkpoint, expected {kind!r}")
    return payload


def load_params(model: torch.nn.Module, payload: dict, arch: dict):
    """Load parameters after checking the architecture fingerprint."""
    if payload["fingerprint"] != fingerprint(arch):
        raise CheckpointError("checkpoint config fingerprint does not match the model")
    model.load_state_dict(payload["params"])
    return model
