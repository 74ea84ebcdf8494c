import json
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionwx.grid import GridSpec, VariableInventory, precip_to_dbz
from regionwx.store import (
    HOUR,
    CorruptChunk,
    DatasetManifest,
    MissingTimestamp,
    StoreError,
    StoreWriter,
    _Welford,
    compute_stats,
    crop_to_precip_region,
    generate_synthetic,
    ingest_cmpas,
    load_sample,
    precip_grid_for,
)

GRID = GridSpec.toy(12, 14, pressure_levels=(500,))
INV = VariableInventory.for_grid(GRID)
T0 = datetime(2019, 7, 1, 0)


def _write(root, states, start=T0, chunk_hours=24, **kw):
    w = StoreWriter(root, GRID, INV, chunk_hours=chunk_hours, **kw)
    w.append_run(start, state=states)
    return w.finalize()


def _states(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, INV.n_channels, *GRID.shape)).astype("<f4")


def test_write_load_round_trip(tmp_path):
    x = _states(3)
    man = _write(tmp_path / "s", x)
    for k in range(3):
        rec = load_sample(man, T0 + k * HOUR)
        assert np.array_equal(rec.state.values, x[k])
    assert np.array_equal(man.read("state", T0), man.read("state", T0))
    assert not (tmp_path / "s" / ".in_progress").exists()


def test_missing_timestamp(tmp_path):
    man = _write(tmp_path / "s", _states(2))
    with pytest.raises(MissingTimestamp):
        load_sample(man, T0 + 5 * HOUR)


def test_chunk_boundary_read(tmp_path):
    x = _states(12)
    man = _write(tmp_path / "s", x, chunk_hours=5)
    assert len(man.groups["state"]["chunks"]) == 3
    window = man.read_window("state", [T0 + k * HOUR for k in range(3, 8)])
    assert np.array_equal(window, x[3:8])


def test_corrupt_chunk_detected(tmp_path):
    man = _write(tmp_path / "s", _states(2))
    path = tmp_path / "s" / man.groups["state"]["chunks"][0]["file"]
    raw = bytearray(path.read_bytes())
    raw[10] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptChunk):
        DatasetManifest.open(tmp_path / "s").read("state", T0)


def test_shape_mismatch_detected(tmp_path):
    _write(tmp_path / "s", _states(2))
    doc = json.loads((tmp_path / "s" / "manifest.json").read_text())
    doc["groups"]["state"]["step_shape"][1] += 1
    (tmp_path / "s" / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(StoreError):
        DatasetManifest.open(tmp_path / "s")


def test_layout_is_little_endian_and_versioned(tmp_path):
    _write(tmp_path / "s", _states(1))
    doc = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert doc["layout_version"] == 1 and doc["byte_order"] == "little" and doc["dtype"] == "<f4"


def test_refuses_overwrite(tmp_path):
    _write(tmp_path / "s", _states(1))
    with pytest.raises(StoreError):
        _write(tmp_path / "s", _states(1))
    _write(tmp_path / "s", _states(1, seed=4), force=True)


def test_runs_must_increase(tmp_path):
    w = StoreWriter(tmp_path / "s", GRID, INV)
    w.append_run(T0, state=_states(3))
    with pytest.raises(StoreError):
        w.append_run(T0 + HOUR, state=_states(2))


def test_writer_rejects_nan(tmp_path):
    x = _states(2)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(StoreError):
        _write(tmp_path / "s", x)


def test_default_splits(tmp_path):
    w = StoreWriter(tmp_path / "s", GRID, INV)
    for y in (2018, 2019, 2020, 2021):
        w.append_run(datetime(y, 1, 1), state=_states(2, y))
    man = w.finalize()
    assert {t.year for t in man.split("train")} == {2018, 2019}
    assert {t.year for t in man.split("val")} == {2020}
    assert {t.year for t in man.split("test")} == {2021}


# statistics ----------------------------------------------------------------------

def test_stats_zero_variance(tmp_path):
    man = _write(tmp_path / "s", np.ones((3, INV.n_channels, *GRID.shape), dtype="<f4"))
    with pytest.raises(StoreError, match="zero variance"):
        compute_stats(man)


def test_stats_two_pass_oracle_and_split(tmp_path):
    w = StoreWriter(tmp_path / "s", GRID, INV)
    train = _states(3, 1)
    w.append_run(datetime(2019, 1, 1), state=train)
    w.append_run(datetime(2020, 1, 1), state=_states(2, 2) + 100)
    w.append_run(datetime(2021, 1, 1), state=_states(2, 3) - 100)
    stats = compute_stats(w.finalize())
    data = train.astype(np.float64).transpose(1, 0, 2, 3).reshape(INV.n_channels, -1)
    mean = data.sum(axis=1) / data.shape[1]
    std = np.sqrt(((data - mean[:, None]) ** 2).sum(axis=1) / data.shape[1])
    np.testing.assert_allclose(stats.mean, mean, atol=1e-10)
    np.testing.assert_allclose(stats.std, std, atol=1e-10)
    assert stats.years == (2019,)


def test_empty_split(tmp_path):
    man = _write(tmp_path / "s", _states(2), start=datetime(2020, 1, 1))
    with pytest.raises(StoreError):
        compute_stats(man, "train")


@settings(max_examples=25)
@given(st.permutations(list(range(6))))
def test_streaming_stats_order_invariant(order):
    samples = [np.random.default_rng(k).normal(k, 1 + k, size=(2, 3, 4)) for k in range(6)]
    a, b = _Welford(2), _Welford(2)
    for s in samples:
        a.add(s)
    for k in order:
        b.add(samples[k])
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
    np.testing.assert_allclose(a.std, b.std, atol=1e-10)


def test_precip_stats_in_dbz(toy_store, toy_stats):
    vals = np.stack([toy_store.read("cmpas", t) for t in toy_store.split("train")])
    dbz = precip_to_dbz(vals)
    mean, std = toy_stats.precip_stats("cmpas")
    assert mean == pytest.approx(dbz.mean(), rel=1e-6)
    assert std == pytest.approx(dbz.std(), rel=1e-6)


# synthetic data ---------------------------------------------------------------------

def test_synthetic_deterministic(tmp_path):
    a = generate_synthetic(tmp_path / "a", GRID, INV, 6, seed=7, years=(2019,))
    b = generate_synthetic(tmp_path / "b", GRID, INV, 6, seed=7, years=(2019,))
    c = generate_synthetic(tmp_path / "c", GRID, INV, 6, seed=8, years=(2019,))
    assert (tmp_path / "a/manifest.json").read_text().replace("/a", "") == \
        (tmp_path / "b/manifest.json").read_text().replace("/b", "")
    for t in a.timestamps:
        for g in ("state", "tp", "cmpas"):
            assert np.array_equal(a.read(g, t), b.read(g, t))
    assert not np.array_equal(a.read("state", T0), c.read("state", T0))


def test_synthetic_properties(toy_store, toy_grid, toy_inventory):
    toy_store.validate()
    times = toy_store.timestamps
    assert len(times) == 3 * 48
    for t0, t1 in zip(times[:20], times[1:21]):
        a, b = toy_store.read("state", t0), toy_store.read("state", t1)
        for c in range(toy_inventory.n_channels):
            r = np.corrcoef(a[c].ravel(), b[c].ravel())[0, 1]
            assert r > 0.9, (t0, toy_inventory.channel_names[c], r)
    tp = np.stack([toy_store.read("tp", t) for t in times])
    cm = np.stack([toy_store.read("cmpas", t) for t in times])
    assert tp.min() >= 0 and cm.min() >= 0
    wet = cm[cm > 0.1]
    assert np.mean(wet) > 1.5 * np.median(wet)     # long right tail
    assert toy_store.grid == toy_grid


def test_synthetic_ranges(toy_store, toy_inventory):
    x = toy_store.read("state", toy_store.timestamps[0])
    z500 = x[toy_inventory.index("z500")]
    assert 50000 < z500.mean() < 60000
    assert 270 < x[toy_inventory.index("2mt")].mean() < 310


def test_synthetic_invalid_hours(tmp_path):
    with pytest.raises(StoreError):
        generate_synthetic(tmp_path / "x", GRID, INV, 0, seed=0)


def test_load_sample_previous_precip(toy_store):
    t = toy_store.timestamps[1]
    rec = load_sample(toy_store, t)
    assert np.array_equal(rec.cmpas_prev, toy_store.read("cmpas", t - HOUR))
    assert load_sample(toy_store, toy_store.timestamps[0]).cmpas_prev is None


def test_precip_crop(toy_grid, toy_store):
    x = np.zeros((2,) + toy_grid.shape)
    assert crop_to_precip_region(x, toy_grid, 26.0).shape == (2, 18, 32)
    assert toy_store.precip_grid.shape == precip_grid_for(toy_grid, 26.0, 5).shape
    full = precip_grid_for(GridSpec.full(), 15.0, 5)
    assert full.shape == (900, 1400)
    assert GridSpec.full().crop_lat(15.0).shape == (181, 281)


def test_ingest_cmpas():
    raw = np.random.default_rng(0).gamma(0.5, 2.0, size=(50, 70))
    out = ingest_cmpas(raw, 5)
    assert out.shape == (10, 14) and abs(out.mean() - raw.mean()) < 1e-10
