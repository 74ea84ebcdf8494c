"""Grid geometry, variable inventory and deterministic value transforms.

Channel ordering is fixed: the surface block comes first, followed by the
pressure-level block in level-major order (all variables of the first
level, then all variables of the second level, ...).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

PRESSURE_LEVELS = (100, 150, 200, 250, 300, 400, 450, 500, 600, 700, 850, 950, 1000)
SURFACE_VARS = ("2mt", "u10", "v10", "mslp")
PRESSURE_VARS = ("z", "t", "u", "v", "q")

# Marshall-Palmer Z = a * R**b
ZR_A = 200.0
ZR_B = 1.6
R_MIN = 0.01

STATS_FORMAT_VERSION = 1
CLIMATOLOGY_FORMAT_VERSION = 1


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Equiangular latitude/longitude grid.

    With ``cell_centered=False`` the bounds are grid points, so a 0-60N span
    at 0.25 deg has 241 rows. Cell-centred grids (the high-resolution
    precipitation products) count cells instead: 15-60N at 0.05 deg is 900.
    """

    lat_start: float
    lat_end: float
    lon_start: float
    lon_end: float
    resolution: float
    pressure_levels: tuple[int, ...] = PRESSURE_LEVELS
    cell_centered: bool = False

    def __post_init__(self):
        if self.resolution <= 0:
            raise GridError("resolution must be positive")
        if self.lat_end <= self.lat_start or self.lon_end <= self.lon_start:
            raise GridError("grid bounds must be increasing")
        object.__setattr__(self, "pressure_levels", tuple(int(p) for p in self.pressure_levels))

    @property
    def n_lat(self) -> int:
        n = round((self.lat_end - self.lat_start) / self.resolution)
        return n if self.cell_centered else n + 1

    @property
    def n_lon(self) -> int:
        n = round((self.lon_end - self.lon_start) / self.resolution)
        return n if self.cell_centered else n + 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def latitudes(self) -> np.ndarray:
        offset = 0.5 * self.resolution if self.cell_centered else 0.0
        return self.lat_start + offset + self.resolution * np.arange(self.n_lat)

    @property
    def longitudes(self) -> np.ndarray:
        offset = 0.5 * self.resolution if self.cell_centered else 0.0
        return self.lon_start + offset + self.resolution * np.arange(self.n_lon)

    @classmethod
    def full(cls) -> GridSpec:
        return cls(0.0, 60.0, 70.0, 140.0, 0.25)

    @classmethod
    def toy(cls, n_lat: int = 24, n_lon: int = 32, resolution: float = 1.0,
            lat_start: float = 20.0, lon_start: float = 100.0,
            pressure_levels=(500, 850)) -> GridSpec:
        if n_lat < 12 or n_lon < 12:
            raise GridError("toy grids need at least 12 rows and columns")
        return cls(lat_start, lat_start + (n_lat - 1) * resolution,
                   lon_start, lon_start + (n_lon - 1) * resolution,
                   resolution, tuple(pressure_levels))

    def crop_lat(self, lat_min: float) -> GridSpec:
        """Grid restricted to rows with latitude >= ``lat_min``."""
        rows = np.nonzero(self.latitudes >= lat_min - 1e-9)[0]
        if rows.size == 0:
            raise GridError(f"no rows at or above {lat_min}")
        start = float(self.latitudes[rows[0]])
        if self.cell_centered:
            start -= 0.5 * self.resolution
        return GridSpec(start, self.lat_end, self.lon_start, self.lon_end,
                        self.resolution, self.pressure_levels, self.cell_centered)

    def refine(self, factor: int) -> GridSpec:
        """Cell-centred grid whose cells tile this grid's extent ``factor`` times finer."""
        return GridSpec(self.lat_start, self.lat_end, self.lon_start, self.lon_end,
                        self.resolution / factor, self.pressure_levels, cell_centered=True)

    def to_dict(self) -> dict:
        return {
            "lat_start": self.lat_start, "lat_end": self.lat_end,
            "lon_start": self.lon_start, "lon_end": self.lon_end,
            "resolution": self.resolution,
            "pressure_levels": list(self.pressure_levels),
            "cell_centered": self.cell_centered,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GridSpec:
        d = dict(d)
        d["pressure_levels"] = tuple(d.get("pressure_levels", PRESSURE_LEVELS))
        return cls(**d)


@dataclass(frozen=True)
class VariableInventory:
    surface_vars: tuple[str, ...] = SURFACE_VARS
    pressure_vars: tuple[str, ...] = PRESSURE_VARS
    pressure_levels: tuple[int, ...] = PRESSURE_LEVELS

    def __post_init__(self):
        for name in ("surface_vars", "pressure_vars", "pressure_levels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def for_grid(cls, grid: GridSpec, surface_vars=SURFACE_VARS,
                 pressure_vars=PRESSURE_VARS) -> VariableInventory:
        return cls(tuple(surface_vars), tuple(pressure_vars), grid.pressure_levels)

    @property
    def n_surface(self) -> int:
        return len(self.surface_vars)

    @property
    def n_levels(self) -> int:
        return len(self.pressure_levels)

    @property
    def n_channels(self) -> int:
        return self.n_surface + len(self.pressure_vars) * self.n_levels

    @property
    def channel_names(self) -> list[str]:
        names = list(self.surface_vars)
        for level in self.pressure_levels:
            names.extend(f"{v}{level}" for v in self.pressure_vars)
        return names

    def index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise KeyError(f"unknown channel {name!r}") from None

    def split(self, values: np.ndarray):
        """Split [..., C, H, W] into surface [..., S, H, W] and pressure [..., V, L, H, W]."""
        surf = values[..., : self.n_surface, :, :]
        upper = values[..., self.n_surface:, :, :]
        lead = upper.shape[:-3]
        upper = upper.reshape(*lead, self.n_levels, len(self.pressure_vars), *upper.shape[-2:])
        return surf, np.swapaxes(upper, -3, -4)

    def to_dict(self) -> dict:
        return {"surface_vars": list(self.surface_vars),
                "pressure_vars": list(self.pressure_vars),
                "pressure_levels": list(self.pressure_levels)}

    @classmethod
    def from_dict(cls, d: dict) -> VariableInventory:
        return cls(tuple(d["surface_vars"]), tuple(d["pressure_vars"]),
                   tuple(d["pressure_levels"]))


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise GridError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class WeatherState:
    values: np.ndarray
    timestamp: datetime
    normalized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise GridError(f"state values must be [C, H, W], got {values.shape}")
        _check_finite(values, "state")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    def check(self, grid: GridSpec, inventory: VariableInventory):
        expected = (inventory.n_channels, grid.n_lat, grid.n_lon)
        if self.values.shape != expected:
            raise GridError(f"state shape {self.values.shape} != {expected}")


@dataclass(frozen=True)
class BoundaryStrip:
    """Lateral frame of a state, laid out as [C, width, perimeter].

    The perimeter axis concatenates top (northmost rows, west to east),
    bottom (southmost rows, west to east), left (westmost columns, south to
    north) and right (eastmost columns, south to north). For the horizontal
    strips ``width`` indexes rows from the outer edge inwards; for the
    vertical strips it indexes columns from the outer edge inwards.
    """

    values: np.ndarray
    width: int
    n_lat: int
    n_lon: int
    timestamp: datetime | None = None

    def __post_init__(self):
        expected = 2 * self.n_lon + 2 * self.n_lat
        if self.values.ndim != 3 or self.values.shape[1:] != (self.width, expected):
            raise GridError(f"boundary shape {self.values.shape} inconsistent with "
                            f"width {self.width} and perimeter {expected}")

    @property
    def perimeter_len(self) -> int:
        return self.values.shape[-1]

    def parts(self):
        """(top, bottom, left, right), each [C, width, edge_len]."""
        a, b, c = self.n_lon, 2 * self.n_lon, 2 * self.n_lon + self.n_lat
        v = self.values
        return v[..., :a], v[..., a:b], v[..., b:c], v[..., c:]


def boundary_layout(values: np.ndarray, width: int = 4) -> np.ndarray:
    """Array form of :func:`extract_boundary` for any leading dims [..., H, W]."""
    if width < 1:
        raise GridError("boundary width must be >= 1")
    n_lat, n_lon = values.shape[-2:]
    if n_lat <= 2 * width or n_lon <= 2 * width:
        raise GridError(f"grid {n_lat}x{n_lon} too small for boundary width {width}")
    # rows are stored south to north; the top strip is the northern edge
    top = values[..., ::-1, :][..., :width, :]
    bottom = values[..., :width, :]
    left = np.swapaxes(values[..., :, :width], -1, -2)
    right = np.swapaxes(values[..., :, ::-1][..., :, :width], -1, -2)
    return np.concatenate([top, bottom, left, right], axis=-1)


def extract_boundary(state: WeatherState, width: int = 4) -> BoundaryStrip:
    n_lat, n_lon = state.values.shape[-2:]
    return BoundaryStrip(boundary_layout(state.values, width), width, n_lat, n_lon,
                         state.timestamp)


@dataclass(frozen=True)
class NormStats:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    years: tuple[int, ...] = ()
    precip: dict = field(default_factory=dict)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != (len(self.names),) or std.shape != mean.shape:
            raise GridError("stats arrays must match channel names")
        if np.any(~(std > 0)):
            bad = [n for n, s in zip(self.names, std) if not s > 0]
            raise GridError(f"non-positive std for channels {bad}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))

    def precip_stats(self, key: str) -> tuple[float, float]:
        """dBZ-domain (mean, std) for a precipitation product."""
        try:
            m, s = self.precip[key]
        except KeyError:
            raise GridError(f"no precipitation stats for {key!r}") from None
        return float(m), float(s)

    def save(self, path):
        doc = {
            "format": "regionwx.normstats",
            "version": STATS_FORMAT_VERSION,
            "channels": list(self.names),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "years": list(self.years),
            "precip": {k: [float(v[0]), float(v[1])] for k, v in self.precip.items()},
        }
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, path, expected_names=None) -> NormStats:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "regionwx.normstats":
            raise GridError(f"{path} is not a stats file")
        if doc.get("version") != STATS_FORMAT_VERSION:
            raise GridError(f"unsupported stats version {doc.get('version')}")
        if expected_names is not None and list(expected_names) != doc["channels"]:
            raise GridError("stats channel names do not match the inventory")
        return cls(tuple(doc["channels"]), np.array(doc["mean"]), np.array(doc["std"]),
                   tuple(doc["years"]), {k: tuple(v) for k, v in doc["precip"].items()})


def _stats_arrays(stats: NormStats, n_channels: int):
    if len(stats.names) != n_channels:
        raise GridError(f"stats have {len(stats.names)} channels, state has {n_channels}")
    return stats.mean[:, None, None], stats.std[:, None, None]


def normalize(state: WeatherState, stats: NormStats) -> WeatherState:
    if state.normalized:
        raise GridError("state is already normalized")
    mean, std = _stats_arrays(stats, state.n_channels)
    return WeatherState((state.values - mean) / std, state.timestamp, normalized=True)


def denormalize(state: WeatherState, stats: NormStats) -> WeatherState:
    if not state.normalized:
        raise GridError("state is not normalized")
    mean, std = _stats_arrays(stats, state.n_channels)
    return WeatherState(state.values * std + mean, state.timestamp, normalized=False)


def normalize_array(values: np.ndarray, stats: NormStats) -> np.ndarray:
    mean, std = _stats_arrays(stats, values.shape[-3])
    return (values - mean) / std


def denormalize_array(values: np.ndarray, stats: NormStats) -> np.ndarray:
    mean, std = _stats_arrays(stats, values.shape[-3])
    return values * std + mean


DBZ_FLOOR = 10.0 * np.log10(ZR_A * R_MIN**ZR_B)


def precip_to_dbz(rate):
    """Rain rate (mm/h) to reflectivity (dBZ); rates below ``R_MIN`` map to the floor."""
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(rate < 0) or np.any(np.isnan(rate)):
        raise GridError("precipitation rate must be non-negative")
    return 10.0 * np.log10(ZR_A * np.maximum(rate, R_MIN) ** ZR_B)


def dbz_to_precip(dbz):
    """Inverse of :func:`precip_to_dbz`; values below the floor decode to 0 mm/h."""
    dbz = np.asarray(dbz, dtype=np.float64)
    rate = (10.0 ** (dbz / 10.0) / ZR_A) ** (1.0 / ZR_B)
    return np.where(dbz < DBZ_FLOOR, 0.0, rate)


def avgpool_downsample(values: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping ``factor`` x ``factor`` block means over the last two axes."""
    values = np.asarray(values)
    n_lat, n_lon = values.shape[-2:]
    if factor < 1 or n_lat % factor or n_lon % factor:
        raise GridError(f"{n_lat}x{n_lon} not divisible by factor {factor}")
    lead = values.shape[:-2]
    blocks = values.reshape(*lead, n_lat // factor, factor, n_lon // factor, factor)
    return blocks.mean(axis=(-3, -1))


@dataclass(frozen=True)
class Climatology:
    """Mean fields keyed by (month, hour of day), stored as [12, 24, C, H, W]."""

    names: tuple[str, ...]
    fields: np.ndarray
    populated: np.ndarray
    years: tuple[int, ...] = ()

    def __post_init__(self):
        if self.fields.shape[:2] != (12, 24) or self.populated.shape != (12, 24):
            raise GridError("climatology must be keyed by 12 months x 24 hours")
        if self.fields.shape[2] != len(self.names):
            raise GridError("climatology channels do not match names")
        if not np.all(np.isfinite(self.fields[self.populated])):
            raise GridError("climatology contains NaN")

    def lookup(self, when: datetime) -> np.ndarray:
        m, h = when.month - 1, when.hour
        if not self.populated[m, h]:
            raise GridError(f"climatology has no entry for month {when.month} hour {when.hour}")
        return self.fields[m, h]

    @property
    def complete(self) -> bool:
        return bool(self.populated.all())

    def save(self, path):
        np.savez(
            path,
            format=np.array("regionwx.climatology"),
            version=np.array(CLIMATOLOGY_FORMAT_VERSION),
            channels=np.array(self.names),
            fields=self.fields.astype("<f8"),
            populated=self.populated,
            years=np.array(self.years, dtype="<i8"),
        )

    @classmethod
    def load(cls, path, expected_names=None) -> Climatology:
        with np.load(path, allow_pickle=False) as z:
            if str(z["format"]) != "regionwx.climatology":
                raise GridError(f"{path} is not a climatology file")
            if int(z["version"]) != CLIMATOLOGY_FORMAT_VERSION:
                raise GridError(f"unsupported climatology version {int(z['version'])}")
            names = tuple(str(n) for n in z["channels"])
            if expected_names is not None and tuple(expected_names) != names:
                raise GridError("climatology channel names do not match the inventory")
            return cls(names, z["fields"], z["populated"], tuple(int(y) for y in z["years"]))


def build_climatology(samples, names, years=(), strict: bool = True) -> Climatology:
    """Arithmetic mean of all samples sharing a (month, hour-of-day) key.

    ``samples`` is an iterable of (timestamp, [C, H, W] array). With
    ``strict`` every one of the 288 keys must be present.
    """
    sums = None
    counts = np.zeros((12, 24), dtype=np.int64)
    for when, values in samples:
        values = np.asarray(values, dtype=np.float64)
        if sums is None:
            sums = np.zeros((12, 24) + values.shape)
        m, h = when.month - 1, when.hour
        sums[m, h] += values
        counts[m, h] += 1
    if sums is None:
        raise GridError("climatology needs at least one sample")
    populated = counts > 0
    if strict and not populated.all():
        missing = [(m + 1, h) for m, h in zip(*np.nonzero(~populated))]
        raise GridError(f"missing (month, hour) keys, e.g. {missing[:3]} ({len(missing)} total)")
    div = np.where(populated, counts, 1)[:, :, None, None, None]
    return Climatology(tuple(names), sums / div, populated, tuple(years))
