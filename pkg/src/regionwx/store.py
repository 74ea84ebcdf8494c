"""Chunked on-disk dataset store, split bookkeeping, statistics and synthetic data.

Layout of a store directory::

    manifest.json            structured-text manifest (layout version, grid,
                             inventory, runs, chunk table, splits, tags)
    chunks/<group>_r<run>_<offset>.bin
                             raw little-endian float32, [n_hours, *step_shape]
    static/topography.bin    raw little-endian float32, [n_lat, n_lon]

Groups are ``state`` (all forecast channels), ``tp`` (coarse total
precipitation, mm/h, forecaster grid) and ``cmpas`` (high-resolution
precipitation, mm/h, its own cell-centred grid). Each chunk entry records
its CRC-32 so corrupt files are detected on read.
"""

from __future__ import annotations

import json
import shutil
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grid import GridSpec, NormStats, VariableInventory, WeatherState, avgpool_downsample, precip_to_dbz

LAYOUT_VERSION = 1
DTYPE = np.dtype("<f4")
GROUPS = ("state", "tp", "cmpas")
HOUR = timedelta(hours=1)
TIME_FMT = "%Y-%m-%dT%H"


class StoreError(Exception):
    pass


class MissingTimestamp(StoreError, KeyError):
    pass


class CorruptChunk(StoreError):
    pass


def format_time(t: datetime) -> str:
    return t.strftime(TIME_FMT)


def parse_time(s: str) -> datetime:
    return datetime.strptime(s, TIME_FMT)


@dataclass(frozen=True)
class Splits:
    train_max_year: int = 2019
    val_years: tuple[int, ...] = (2020,)
    test_years: tuple[int, ...] = (2021,)

    def assign(self, t: datetime) -> str | None:
        if t.year in self.val_years:
            return "val"
        if t.year in self.test_years:
            return "test"
        if t.year <= self.train_max_year:
            return "train"
        return None


@dataclass(frozen=True)
class SampleRecord:
    timestamp: datetime
    state: WeatherState | None
    topography: np.ndarray
    tp: np.ndarray | None = None
    cmpas: np.ndarray | None = None
    cmpas_prev: np.ndarray | None = None


@dataclass
class DatasetManifest:
    root: Path
    grid: GridSpec
    inventory: VariableInventory
    runs: list[tuple[datetime, int]]
    groups: dict
    precip_grid: GridSpec | None = None
    precip_crop_lat: float | None = None
    splits: Splits = field(default_factory=Splits)
    tags: dict = field(default_factory=dict)
    static: dict = field(default_factory=dict)

    @classmethod
    def open(cls, root) -> DatasetManifest:
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise StoreError(f"no manifest at {path}")
        doc = json.loads(path.read_text())
        if doc.get("layout_version") != LAYOUT_VERSION:
            raise StoreError(f"unsupported layout version {doc.get('layout_version')}")
        if doc.get("byte_order") != "little" or doc.get("dtype") != DTYPE.str:
            raise StoreError("store must be little-endian float32")
        sp = doc.get("splits", {})
        m = cls(
            root=root,
            grid=GridSpec.from_dict(doc["grid"]),
            inventory=VariableInventory.from_dict(doc["inventory"]),
            runs=[(parse_time(r["start"]), int(r["n_hours"])) for r in doc["runs"]],
            groups=doc["groups"],
            precip_grid=GridSpec.from_dict(doc["precip_grid"]) if doc.get("precip_grid") else None,
            precip_crop_lat=doc.get("precip_crop_lat"),
            splits=Splits(sp.get("train_max_year", 2019), tuple(sp.get("val_years", (2020,))),
                          tuple(sp.get("test_years", (2021,)))),
            tags=doc.get("tags", {}),
            static=doc.get("static", {}),
        )
        m.validate()
        return m

    def validate(self):
        """Structural checks: cadence, chunk coverage and shapes."""
        last = None
        for start, n in self.runs:
            if n < 1:
                raise StoreError("empty run in manifest")
            if last is not None and start <= last:
                raise StoreError("runs must be strictly increasing in time")
            last = start + (n - 1) * HOUR
        for name, g in self.groups.items():
            if name not in GROUPS:
                raise StoreError(f"unknown group {name!r}")
            expected = self._step_shape(name)
            if tuple(g["step_shape"]) != expected:
                raise StoreError(f"group {name} step shape {g['step_shape']} != {expected}")
            covered = {}
            for c in g["chunks"]:
                covered.setdefault(c["run"], []).append((c["offset"], c["n"]))
            for i, (_, n) in enumerate(self.runs):
                spans = sorted(covered.get(i, []))
                pos = 0
                for off, k in spans:
                    if off != pos:
                        raise StoreError(f"group {name} run {i} has a gap at offset {pos}")
                    pos += k
                if pos != n:
                    raise StoreError(f"group {name} run {i} covers {pos} of {n} hours")

    def _step_shape(self, group: str) -> tuple[int, ...]:
        if group == "state":
            return (self.inventory.n_channels, self.grid.n_lat, self.grid.n_lon)
        if group == "tp":
            return (self.grid.n_lat, self.grid.n_lon)
        if self.precip_grid is None:
            raise StoreError("cmpas group requires a precipitation grid")
        return (self.precip_grid.n_lat, self.precip_grid.n_lon)

    @property
    def timestamps(self) -> list[datetime]:
        return [start + k * HOUR for start, n in self.runs for k in range(n)]

    def split(self, name: str) -> list[datetime]:
        return [t for t in self.timestamps if self.splits.assign(t) == name]

    def has(self, t: datetime) -> bool:
        return self._locate(t) is not None

    def _locate(self, t: datetime):
        for i, (start, n) in enumerate(self.runs):
            k = (t - start) // HOUR
            if start <= t and k < n and start + k * HOUR == t:
                return i, int(k)
        return None

    def topography(self) -> np.ndarray:
        entry = self.static.get("topography")
        if entry is None:
            return np.zeros(self.grid.shape, dtype=DTYPE)
        return _read_blob(self.root / entry["file"], tuple(entry["shape"]), entry["crc32"])

    def read(self, group: str, t: datetime) -> np.ndarray:
        if group not in self.groups:
            raise StoreError(f"store has no {group!r} group")
        loc = self._locate(t)
        if loc is None:
            raise MissingTimestamp(f"{format_time(t)} not in store {self.root}")
        run, k = loc
        g = self.groups[group]
        for c in g["chunks"]:
            if c["run"] == run and c["offset"] <= k < c["offset"] + c["n"]:
                data = _read_blob(self.root / c["file"], (c["n"], *g["step_shape"]), c["crc32"])
                return data[k - c["offset"]]
        raise CorruptChunk(f"no chunk covers {format_time(t)} in group {group}")

    def read_window(self, group: str, times) -> np.ndarray:
        return np.stack([self.read(group, t) for t in times])


@lru_cache(maxsize=64)
def _read_cached(path: str, mtime: float, shape: tuple, crc: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    expected = int(np.prod(shape)) * DTYPE.itemsize
    if len(raw) != expected:
        raise CorruptChunk(f"{path}: {len(raw)} bytes, expected {expected}")
    if zlib.crc32(raw) != crc:
        raise CorruptChunk(f"{path}: checksum mismatch")
    arr = np.frombuffer(raw, dtype=DTYPE).reshape(shape)
    arr.setflags(write=False)
    return arr


def _read_blob(path: Path, shape: tuple, crc: int) -> np.ndarray:
    if not path.exists():
        raise CorruptChunk(f"missing chunk file {path}")
    return _read_cached(str(path), path.stat().st_mtime, shape, crc)


def _write_blob(path: Path, data: np.ndarray) -> int:
    raw = np.ascontiguousarray(data, dtype=DTYPE).tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return zlib.crc32(raw)


def load_sample(manifest: DatasetManifest, timestamp: datetime) -> SampleRecord:
    if not manifest.has(timestamp):
        raise MissingTimestamp(f"{format_time(timestamp)} not in store {manifest.root}")
    state = None
    if "state" in manifest.groups:
        state = WeatherState(manifest.read("state", timestamp), timestamp)
    tp = manifest.read("tp", timestamp) if "tp" in manifest.groups else None
    cmpas = prev = None
    if "cmpas" in manifest.groups:
        cmpas = manifest.read("cmpas", timestamp)
        if manifest.has(timestamp - HOUR):
            prev = manifest.read("cmpas", timestamp - HOUR)
    return SampleRecord(timestamp, state, manifest.topography(), tp, cmpas, prev)


class StoreWriter:
    """Single-writer builder for a store directory.

    The manifest is written last, so a directory without one (or with the
    ``.in_progress`` marker) is an incomplete store.
    """

    def __init__(self, root, grid: GridSpec, inventory: VariableInventory,
                 precip_grid: GridSpec | None = None, precip_crop_lat: float | None = None,
                 chunk_hours: int = 24, splits: Splits = Splits(), tags=None,
                 force: bool = False):
        self.root = Path(root)
        if (self.root / "manifest.json").exists() and not force:
            raise StoreError(f"{self.root} already holds a store (use force to overwrite)")
        if self.root.exists() and force:
            shutil.rmtree(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / ".in_progress").touch()
        self.grid, self.inventory = grid, inventory
        self.precip_grid, self.precip_crop_lat = precip_grid, precip_crop_lat
        self.chunk_hours = chunk_hours
        self.splits = splits
        self.tags = dict(tags or {})
        self.runs: list[tuple[datetime, int]] = []
        self.groups: dict = {}
        self.static: dict = {}

    def set_topography(self, topo: np.ndarray):
        topo = np.asarray(topo)
        if topo.shape != self.grid.shape:
            raise StoreError(f"topography shape {topo.shape} != {self.grid.shape}")
        crc = _write_blob(self.root / "static" / "topography.bin", topo)
        self.static["topography"] = {"file": "static/topography.bin",
                                     "shape": list(topo.shape), "crc32": crc}

    def append_run(self, start: datetime, state=None, tp=None, cmpas=None):
        """Append a contiguous hourly run; each array has the hour as its first axis."""
        given = {k: v for k, v in (("state", state), ("tp", tp), ("cmpas", cmpas)) if v is not None}
        if not given:
            raise StoreError("append_run needs at least one group")
        lengths = {len(v) for v in given.values()}
        if len(lengths) != 1:
            raise StoreError("all groups in a run must have the same number of hours")
        n = lengths.pop()
        if self.runs and start <= self.runs[-1][0] + (self.runs[-1][1] - 1) * HOUR:
            raise StoreError("runs must be appended in increasing time order")
        if self.groups and set(given) != set(self.groups):
            raise StoreError("every run must supply the same groups")
        run = len(self.runs)
        self.runs.append((start, n))
        for name, data in given.items():
            data = np.asarray(data)
            if not np.all(np.isfinite(data)):
                raise StoreError(f"group {name} contains NaN or Inf")
            g = self.groups.setdefault(name, {"step_shape": list(data.shape[1:]), "chunks": []})
            if list(data.shape[1:]) != g["step_shape"]:
                raise StoreError(f"group {name} shape changed between runs")
            for off in range(0, n, self.chunk_hours):
                k = min(self.chunk_hours, n - off)
                rel = f"chunks/{name}_r{run:04d}_{off:06d}.bin"
                crc = _write_blob(self.root / rel, data[off:off + k])
                g["chunks"].append({"file": rel, "run": run, "offset": off, "n": k, "crc32": crc})

    def finalize(self) -> DatasetManifest:
        doc = {
            "format": "regionwx.store",
            "layout_version": LAYOUT_VERSION,
            "byte_order": "little",
            "dtype": DTYPE.str,
            "grid": self.grid.to_dict(),
            "inventory": self.inventory.to_dict(),
            "channels": self.inventory.channel_names,
            "precip_grid": self.precip_grid.to_dict() if self.precip_grid else None,
            "precip_crop_lat": self.precip_crop_lat,
            "chunk_hours": self.chunk_hours,
            "runs": [{"start": format_time(s), "n_hours": n} for s, n in self.runs],
            "groups": self.groups,
            "static": self.static,
            "splits": {"train_max_year": self.splits.train_max_year,
                       "val_years": list(self.splits.val_years),
                       "test_years": list(self.splits.test_years)},
            "tags": self.tags,
        }
        (self.root / "manifest.json").write_text(json.dumps(doc, indent=1))
        (self.root / ".in_progress").unlink(missing_ok=True)
        return DatasetManifest.open(self.root)


def crop_to_precip_region(values: np.ndarray, grid: GridSpec, lat_min: float) -> np.ndarray:
    """Keep rows with latitude >= ``lat_min`` (the precipitation-diagnosis domain).

    The forecaster covers 0-60N but the precipitation products start at 15N.
    """
    rows = grid.latitudes >= lat_min - 1e-9
    return values[..., rows, :]


def ingest_cmpas(raw: np.ndarray, factor: int = 5) -> np.ndarray:
    """Downsample a raw high-resolution precipitation analysis by block averaging."""
    return avgpool_downsample(raw, factor)


class _Welford:
    """Chan/Welford accumulator merging per-sample moments."""

    def __init__(self, n_channels: int):
        self.n = 0
        self.mean = np.zeros(n_channels)
        self.m2 = np.zeros(n_channels)

    def add(self, x: np.ndarray):
        x = x.reshape(x.shape[0], -1).astype(np.float64)
        nb = x.shape[1]
        mb = x.mean(axis=1)
        m2b = ((x - mb[:, None]) ** 2).sum(axis=1)
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * nb / n
        self.m2 = self.m2 + m2b + delta**2 * self.n * nb / n
        self.n = n

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.m2 / self.n)


def compute_stats(manifest: DatasetManifest, split: str = "train") -> NormStats:
    """Per-channel mean/std over one split, streamed one sample at a time.

    Precipitation groups are summarised in the dBZ domain.
    """
    times = manifest.split(split)
    if not times:
        raise StoreError(f"split {split!r} is empty")
    names = manifest.inventory.channel_names
    acc = _Welford(len(names))
    precip = {g: _Welford(1) for g in ("tp", "cmpas") if g in manifest.groups}
    for t in times:
        acc.add(manifest.read("state", t))
        for g, a in precip.items():
            a.add(precip_to_dbz(manifest.read(g, t))[None])
    std = acc.std
    zero = [n for n, s in zip(names, std) if not s > 0]
    if zero:
        raise StoreError(f"zero variance in channels {zero}")
    pstats = {}
    for g, a in precip.items():
        if not a.std[0] > 0:
            raise StoreError(f"zero variance in precipitation group {g}")
        pstats[g] = (float(a.mean[0]), float(a.std[0]))
    years = sorted({t.year for t in times})
    return NormStats(tuple(names), acc.mean, std, tuple(years), pstats)


# (mean, amplitude) per surface variable
_SURFACE_RANGES = {"2mt": (288.0, 8.0), "u10": (0.0, 4.0), "v10": (0.0, 4.0),
                   "mslp": (101300.0, 900.0)}


def _pressure_range(var: str, level: int) -> tuple[float, float]:
    # rough standard-atmosphere profiles
    height = 44330.8 * (1.0 - (level / 1013.25) ** 0.190263)
    if var == "z":
        return 9.80665 * height, 30.0 + 0.02 * height
    if var == "t":
        return max(288.15 - 0.0065 * height, 216.65), 5.0
    if var in ("u", "v"):
        return 0.0, 4.0 + 0.001 * height
    if var == "q":
        return 0.012 * (level / 1000.0) ** 3 + 2e-6, 0.004 * (level / 1000.0) ** 3 + 1e-6
    return 0.0, 1.0


def channel_ranges(inventory: VariableInventory) -> list[tuple[float, float]]:
    out = [_SURFACE_RANGES.get(v, (0.0, 1.0)) for v in inventory.surface_vars]
    for level in inventory.pressure_levels:
        out.extend(_pressure_range(v, level) for v in inventory.pressure_vars)
    return out


class _SpectralField:
    """Band-limited periodic noise, advected at a fixed velocity with AR(1) renewal."""

    def __init__(self, rng, shape, n_fields, length_scale, velocity, rho):
        self.shape = shape
        ky = np.fft.fftfreq(shape[0])[:, None]
        kx = np.fft.rfftfreq(shape[1])[None, :]
        self.filt = np.exp(-0.5 * (ky**2 + kx**2) * (2 * np.pi * length_scale) ** 2)
        self.shift = np.exp(-2j * np.pi * (ky * velocity[0] + kx * velocity[1]))
        self.rho = rho
        self.rng = rng
        self.coef = self._noise(n_fields)
        field = np.fft.irfft2(self.coef * self.filt, s=shape)
        self.scale = 1.0 / field.std(axis=(-2, -1), keepdims=True)

    def _noise(self, n):
        shp = (n,) + self.filt.shape
        return self.rng.standard_normal(shp) + 1j * self.rng.standard_normal(shp)

    def current(self) -> np.ndarray:
        return np.fft.irfft2(self.coef * self.filt, s=self.shape) * self.scale

    def step(self):
        innov = self._noise(self.coef.shape[0])
        self.coef = self.shift * (self.rho * self.coef + np.sqrt(1 - self.rho**2) * innov)


def synthetic_topography(grid: GridSpec, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 17])
    lat = (grid.latitudes - grid.lat_start) / (grid.lat_end - grid.lat_start)
    lon = (grid.longitudes - grid.lon_start) / (grid.lon_end - grid.lon_start)
    yy, xx = np.meshgrid(lat, lon, indexing="ij")
    plateau = 4500.0 * np.exp(-((yy - 0.55) ** 2 / 0.02 + (xx - 0.3) ** 2 / 0.03))
    rough = ndimage.gaussian_filter(rng.standard_normal(grid.shape), sigma=max(grid.shape) / 16)
    rough = 300.0 * rough / (rough.std() + 1e-12)
    return np.maximum(plateau + rough + 200.0, 0.0)


def precip_grid_for(grid: GridSpec, crop_lat: float, factor: int) -> GridSpec:
    """High-resolution, cell-centred precipitation grid over the cropped domain."""
    coarse = grid.crop_lat(crop_lat)
    return GridSpec(coarse.lat_start, coarse.lat_end, grid.lon_start, grid.lon_end,
                    grid.resolution / factor, (), cell_centered=True)


def generate_synthetic(root, grid: GridSpec, inventory: VariableInventory, n_hours: int,
                       seed: int, years=(2019, 2020, 2021), start=(7, 1, 0),
                       precip_crop_lat: float | None = None, precip_factor: int = 5,
                       chunk_hours: int = 24, length_scale: float | None = None,
                       force: bool = False) -> DatasetManifest:
    """Write a seeded synthetic store with one ``n_hours`` run per year.

    Every run starts at the same calendar instant (month, day, hour) so the
    training-year climatology covers the validation/test keys.
    """
    if n_hours < 1:
        raise StoreError("n_hours must be >= 1")
    rng = np.random.default_rng(seed)
    n_lat, n_lon = grid.shape
    pad = (n_lat + n_lat // 2, n_lon + n_lon // 2)
    ls = length_scale if length_scale is not None else max(n_lat, n_lon) / 10.0
    velocity = (0.15 * ls / 4.0, 0.35 * ls / 4.0)
    n_vars = len(inventory.pressure_vars)
    n_lev = inventory.n_levels
    ranges = np.array(channel_ranges(inventory))
    topo = synthetic_topography(grid, seed)
    topo_anom = (topo - topo.mean()) / (topo.std() + 1e-12)

    crop_lat = precip_crop_lat if precip_crop_lat is not None else grid.lat_start
    precip_grid = precip_grid_for(grid, crop_lat, precip_factor)

    writer = StoreWriter(root, grid, inventory, precip_grid, crop_lat, chunk_hours,
                         tags={"kind": "synthetic", "seed": seed}, force=force)
    writer.set_topography(topo)
    for year in years:
        t0 = datetime(year, start[0], start[1], start[2])
        surf = _SpectralField(rng, pad, inventory.n_surface, ls, velocity, 0.995)
        shared = _SpectralField(rng, pad, n_vars, ls, velocity, 0.995)
        local = _SpectralField(rng, pad, n_vars * n_lev, ls, velocity, 0.99)
        wet = _SpectralField(rng, pad, 1, ls * 0.6, velocity, 0.99)
        texture = rng.standard_normal(precip_grid.shape)
        texture = ndimage.gaussian_filter(texture, sigma=precip_factor / 2.0)
        texture /= texture.std() + 1e-12
        states = np.empty((n_hours, inventory.n_channels, n_lat, n_lon), dtype=np.float64)
        tps = np.empty((n_hours, n_lat, n_lon))
        cm = np.empty((n_hours,) + precip_grid.shape)
        for h in range(n_hours):
            s = surf.current()[:, :n_lat, :n_lon]
            g = shared.current()[:, :n_lat, :n_lon]
            loc = local.current()[:, :n_lat, :n_lon].reshape(n_lev, n_vars, n_lat, n_lon)
            diurnal = np.sin(2 * np.pi * ((t0.hour + h) % 24) / 24.0)
            anom = [s[i] + (0.3 * diurnal - 0.5 * topo_anom if v == "2mt" else 0.0)
                    for i, v in enumerate(inventory.surface_vars)]
            for li in range(n_lev):
                mix = 0.5 + 0.4 * li / max(n_lev - 1, 1)
                anom.extend(np.sqrt(mix) * g[vi] + np.sqrt(1 - mix) * loc[li, vi]
                            for vi in range(n_vars))
            anom = np.stack(anom)
            states[h] = ranges[:, 0, None, None] + ranges[:, 1, None, None] * anom
            if "q" in inventory.pressure_vars:
                qi = [inventory.channel_names.index(f"q{lv}") for lv in inventory.pressure_levels]
                states[h, qi] = np.maximum(states[h, qi], 1e-7)
            w = wet.current()[0, :n_lat, :n_lon]
            rate = 4.0 * np.maximum(w + 0.3 * anom[0] - 0.6, 0.0) ** 1.5
            tps[h] = rate
            coarse = crop_to_precip_region(rate, grid, crop_lat)
            fine = ndimage.zoom(coarse, (precip_grid.n_lat / coarse.shape[0],
                                         precip_grid.n_lon / coarse.shape[1]), order=1)
            fine = fine[: precip_grid.n_lat, : precip_grid.n_lon]
            cm[h] = np.maximum(fine * np.exp(0.4 * texture), 0.0)
            texture = np.roll(texture, 1, axis=1) if h % 3 == 2 else texture
            for f in (surf, shared, local, wet):
                f.step()
        writer.append_run(t0, state=states.astype(DTYPE), tp=tps.astype(DTYPE),
                          cmpas=cm.astype(DTYPE))
    return writer.finalize()
