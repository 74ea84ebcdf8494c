"""Forecast verification: latitude-weighted RMSE/ACC and threshold precipitation scores."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PRECIP_THRESHOLDS = (0.1, 1.0, 5.0, 10.0)


class MetricError(ValueError):
    pass


def lat_weights(latitudes, normalize: bool = False) -> np.ndarray:
    """cos(latitude) per row as an [n_lat, 1] column.

    With ``normalize`` the weights are divided by their mean, so they sum
    to the number of rows.
    """
    w = np.cos(np.deg2rad(np.asarray(latitudes, dtype=np.float64)))
    w = np.where(np.abs(w) < 1e-15, 0.0, w)
    if normalize:
        w = w / w.mean()
    return w[:, None]


def _prepare(pred, obs, weights):
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {obs.shape}")
    if np.isnan(pred).any() or np.isnan(obs).any():
        raise MetricError("NaN in input fields")
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), pred.shape)
    return pred, obs, w


def weighted_rmse(pred, obs, weights) -> float:
    """sqrt(mean(w * (obs - pred)**2)) over all N grid points."""
    pred, obs, w = _prepare(pred, obs, weights)
    return float(np.sqrt(np.mean(w * (obs - pred) ** 2)))


def weighted_acc(pred, obs, climatology=None, weights=1.0, mode: str = "climatology") -> float:
    """Latitude-weighted anomaly correlation coefficient.

    ``mode="climatology"``: anomalies are departures from ``climatology``,
    centred by their weighted mean before correlating. ``mode="field_mean"``
    takes departures from each field's plain mean (no climatology).
    """
    pred, obs, w = _prepare(pred, obs, weights)
    if mode == "climatology":
        if climatology is None:
            raise MetricError("climatology mode needs a climatology field")
        clim = np.broadcast_to(np.asarray(climatology, dtype=np.float64), pred.shape)
        a, b = pred - clim, obs - clim
        a = a - np.sum(w * a) / np.sum(w)
        b = b - np.sum(w * b) / np.sum(w)
    elif mode == "field_mean":
        a, b = pred - pred.mean(), obs - obs.mean()
    else:
        raise MetricError(f"unknown ACC mode {mode!r}")
    denom = math.sqrt(np.sum(w * a * a) * np.sum(w * b * b))
    if denom == 0.0:
        raise MetricError("zero-variance anomaly field; ACC undefined")
    return float(np.clip(np.sum(w * a * b) / denom, -1.0, 1.0))


@dataclass(frozen=True)
class ContingencyCounts:
    hits: int
    false_alarms: int
    misses: int
    true_negatives: int
    threshold: float

    @property
    def total(self) -> int:
        return self.hits + self.false_alarms + self.misses + self.true_negatives

    def __add__(self, other: ContingencyCounts) -> ContingencyCounts:
        if other.threshold != self.threshold:
            raise MetricError("cannot add counts for different thresholds")
        return ContingencyCounts(self.hits + other.hits, self.false_alarms + other.false_alarms,
                                 self.misses + other.misses,
                                 self.true_negatives + other.true_negatives, self.threshold)


def contingency(pred, obs, threshold: float) -> ContingencyCounts:
    """2x2 table with an event defined as value >= threshold."""
    if threshold < 0:
        raise MetricError("threshold must be non-negative")
    pred = np.asarray(pred)
    obs = np.asarray(obs)
    if pred.shape != obs.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {obs.shape}")
    fp, fo = pred >= threshold, obs >= threshold
    return ContingencyCounts(int(np.sum(fp & fo)), int(np.sum(fp & ~fo)),
                             int(np.sum(~fp & fo)), int(np.sum(~fp & ~fo)), float(threshold))


# Scores return None when their denominator is zero.

def ts(c: ContingencyCounts) -> float | None:
    d = c.hits + c.false_alarms + c.misses
    return c.hits / d if d else None


def pod(c: ContingencyCounts) -> float | None:
    d = c.hits + c.misses
    return c.hits / d if d else None


def far(c: ContingencyCounts) -> float | None:
    d = c.hits + c.false_alarms
    return c.false_alarms / d if d else None


@dataclass(frozen=True)
class MetricRow:
    variable: str
    lead_hours: int
    metric: str
    value: float | None
    n_samples: int


def evaluate_rollout(forecasts, truth, climatology, variables, leads, channel_names, latitudes,
                     normalize_weights: bool = False, acc_mode: str = "climatology"):
    """Per-variable, per-lead mean RMSE and ACC.

    ``forecasts`` maps lead hours to a list of (valid_time, [C, H, W]);
    ``truth(valid_time)`` returns the verifying [C, H, W] state or raises
    KeyError. Returns (rows, coverage), coverage being the fraction of
    forecast fields whose verifying truth was found.
    """
    w = lat_weights(latitudes, normalize_weights)
    idx = {v: channel_names.index(v) for v in variables}
    rows, found, wanted = [], 0, 0
    for lead in leads:
        per_var = {v: ([], []) for v in variables}
        for when, fc in forecasts.get(lead, []):
            wanted += 1
            try:
                obs = truth(when)
            except KeyError:
                continue
            found += 1
            clim = climatology.lookup(when) if climatology is not None else None
            for v, c in idx.items():
                per_var[v][0].append(weighted_rmse(fc[c], obs[c], w))
                per_var[v][1].append(weighted_acc(fc[c], obs[c],
                                                  None if clim is None else clim[c], w, acc_mode))
        for v in variables:
            r, a = per_var[v]
            if r:
                rows.append(MetricRow(v, lead, "rmse", float(np.mean(r)), len(r)))
                rows.append(MetricRow(v, lead, "acc", float(np.mean(a)), len(a)))
    coverage = found / wanted if wanted else 0.0
    return rows, coverage


def evaluate_precipitation(pairs, lead_hours: int = 0, thresholds=PRECIP_THRESHOLDS,
                           variable: str = "precip"):
    """TS/POD/FAR rows from (diagnosed, observed) mm/h field pairs, pooled over all pairs."""
    pairs = list(pairs)
    rows = []
    for thr in thresholds:
        total = ContingencyCounts(0, 0, 0, 0, float(thr))
        for pred, obs in pairs:
            total = total + contingency(pred, obs, thr)
        for name, fn in (("ts", ts), ("pod", pod), ("far", far)):
            rows.append(MetricRow(variable, lead_hours, f"{name}@{thr:g}", fn(total), len(pairs)))
    return rows


def write_table(rows, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["variable", "lead_hours", "metric", "value", "n_samples"])
        for r in rows:
            out.writerow([r.variable, r.lead_hours, r.metric,
                          "undefined" if r.value is None else repr(float(r.value)), r.n_samples])


def read_table(path) -> list[MetricRow]:
    with Path(path).open(newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            value = None if r["value"] == "undefined" else float(r["value"])
            rows.append(MetricRow(r["variable"], int(r["lead_hours"]), r["metric"], value,
                                  int(r["n_samples"])))
    return rows
