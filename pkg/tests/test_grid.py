from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from regionwx.grid import (
    DBZ_FLOOR,
    PRESSURE_LEVELS,
    R_MIN,
    Climatology,
    GridError,
    GridSpec,
    NormStats,
    VariableInventory,
    WeatherState,
    avgpool_downsample,
    boundary_layout,
    build_climatology,
    dbz_to_precip,
    denormalize,
    extract_boundary,
    normalize,
    precip_to_dbz,
)

T0 = datetime(2019, 7, 1, 0)
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_full_grid_geometry():
    g = GridSpec.full()
    assert g.shape == (241, 281)
    assert g.pressure_levels == PRESSURE_LEVELS
    assert VariableInventory.for_grid(g).n_channels == 69


@given(st.integers(12, 40), st.integers(12, 40))
def test_toy_grid_any_size(n_lat, n_lon):
    g = GridSpec.toy(n_lat, n_lon)
    assert g.shape == (n_lat, n_lon)
    assert g.n_lat == round((g.lat_end - g.lat_start) / g.resolution) + 1


def test_toy_grid_too_small():
    with pytest.raises(GridError):
        GridSpec.toy(11, 20)


def test_channel_order_surface_then_level_major():
    inv = VariableInventory(pressure_levels=(500, 850))
    assert inv.channel_names == ["2mt", "u10", "v10", "mslp", "z500", "t500", "u500", "v500",
                                 "q500", "z850", "t850", "u850", "v850", "q850"]
    x = np.arange(14)[:, None, None] * np.ones((1, 2, 3))
    surf, upper = inv.split(x)
    assert surf.shape == (4, 2, 3) and upper.shape == (5, 2, 2, 3)
    assert upper[0, 1, 0, 0] == inv.index("z850")


def test_grid_dict_round_trip():
    g = GridSpec.full().refine(5)
    assert GridSpec.from_dict(g.to_dict()) == g


# boundary -------------------------------------------------------------------

def test_full_scale_boundary_shape():
    state = WeatherState(np.zeros((69, 241, 281), dtype=np.float32), T0)
    strip = extract_boundary(state)
    assert strip.values.shape == (69, 4, 1044)


def test_boundary_too_small_grid():
    with pytest.raises(GridError):
        extract_boundary(WeatherState(np.zeros((3, 8, 8)), T0), 4)


def test_constant_state_boundary():
    strip = extract_boundary(WeatherState(np.full((2, 12, 16), 3.5), T0))
    assert strip.perimeter_len == 2 * 16 + 2 * 12 == 56
    assert np.all(strip.values == 3.5)


def test_boundary_layout_order():
    n_lat, n_lon, w = 12, 16, 4
    rows = np.arange(n_lat)[:, None] * 100 + np.arange(n_lon)[None, :]
    strip = boundary_layout(rows[None].astype(float), w)[0]
    top, bottom = strip[:, :n_lon], strip[:, n_lon:2 * n_lon]
    left, right = strip[:, 2 * n_lon:2 * n_lon + n_lat], strip[:, 2 * n_lon + n_lat:]
    assert np.array_equal(top[0], rows[-1])            # northmost row, west to east
    assert np.array_equal(bottom[0], rows[0])
    assert np.array_equal(left[0], rows[:, 0])         # westmost column, south to north
    assert np.array_equal(right[0], rows[:, -1])
    assert np.array_equal(top[3], rows[-4])


@settings(max_examples=30)
@given(st.integers(9, 20), st.integers(9, 20), st.integers(1, 4))
def test_corners_appear_exactly_twice(n_lat, n_lon, width):
    ids = np.arange(n_lat * n_lon, dtype=float).reshape(n_lat, n_lon)
    strip = boundary_layout(ids, width)
    assert strip.shape == (width, 2 * n_lat + 2 * n_lon)
    values, counts = np.unique(strip, return_counts=True)
    corner_ids = {ids[i, j] for i in (0, -1) for j in (0, -1)}
    count = dict(zip(values, counts))
    for c in corner_ids:
        assert count[c] == 2
    interior_edge = ids[0, n_lon // 2]
    assert count[interior_edge] == 1


# normalization ----------------------------------------------------------------

def _stats(n):
    return NormStats(tuple(f"c{i}" for i in range(n)), np.linspace(-3, 5, n), np.linspace(0.5, 4, n))


def test_normalize_examples():
    s = _stats(3)
    x = WeatherState(np.broadcast_to(s.mean[:, None, None], (3, 4, 4)), T0)
    assert np.all(normalize(x, s).values == 0)
    s2 = NormStats(("a",), np.array([2.0]), np.array([4.0]))
    assert normalize(WeatherState(np.full((1, 2, 2), 10.0), T0), s2).values[0, 0, 0] == 2.0


def test_normalize_errors():
    s = _stats(3)
    x = normalize(WeatherState(np.zeros((3, 4, 4)), T0), s)
    with pytest.raises(GridError):
        normalize(x, s)
    with pytest.raises(GridError):
        denormalize(WeatherState(np.zeros((3, 4, 4)), T0), s)
    with pytest.raises(GridError):
        normalize(WeatherState(np.zeros((2, 4, 4)), T0), s)
    with pytest.raises(GridError):
        NormStats(("a",), np.array([0.0]), np.array([0.0]))


@given(hnp.arrays(np.float64, (3, 4, 5), elements=finite))
def test_normalize_round_trip(values):
    s = _stats(3)
    back = denormalize(normalize(WeatherState(values, T0), s), s).values
    np.testing.assert_allclose(back, values, rtol=1e-6, atol=1e-9)


def test_state_rejects_nan():
    with pytest.raises(GridError):
        WeatherState(np.full((1, 2, 2), np.nan), T0)


def test_stats_file_round_trip(tmp_path):
    s = NormStats(("a", "b"), np.array([1.0, 2.0]), np.array([3.0, 4.0]), (2019,),
                  {"cmpas": (5.0, 6.0)})
    s.save(tmp_path / "s.json")
    back = NormStats.load(tmp_path / "s.json", ["a", "b"])
    assert back.names == s.names and back.precip_stats("cmpas") == (5.0, 6.0)
    with pytest.raises(GridError):
        NormStats.load(tmp_path / "s.json", ["a", "c"])


# dBZ ----------------------------------------------------------------------------

def test_dbz_examples():
    assert precip_to_dbz(0.0) == pytest.approx(DBZ_FLOOR)
    assert precip_to_dbz(0.0) == precip_to_dbz(R_MIN)
    assert abs(dbz_to_precip(precip_to_dbz(5.0)) - 5.0) < 1e-6
    assert precip_to_dbz(1.0) == pytest.approx(10 * np.log10(200.0))
    with pytest.raises(GridError):
        precip_to_dbz(-0.1)


@given(st.floats(R_MIN, 500.0), st.floats(R_MIN, 500.0))
def test_dbz_monotone_and_invertible(r1, r2):
    d1, d2 = precip_to_dbz(r1), precip_to_dbz(r2)
    if r1 < r2:
        assert d1 < d2
    assert dbz_to_precip(d1) == pytest.approx(r1, rel=1e-9)


def test_dbz_below_floor_decodes_to_zero():
    assert dbz_to_precip(DBZ_FLOOR - 1.0) == 0.0


# downsampling -------------------------------------------------------------------

def test_avgpool_full_scale_shape():
    out = avgpool_downsample(np.zeros((4500, 7000), dtype=np.float32), 5)
    assert out.shape == (900, 1400)


def test_avgpool_errors_and_constant():
    with pytest.raises(GridError):
        avgpool_downsample(np.zeros((10, 12)), 5)
    assert np.all(avgpool_downsample(np.full((10, 15), 2.5), 5) == 2.5)


@given(hnp.arrays(np.float64, (6, 9), elements=finite), st.floats(-10, 10), finite)
def test_avgpool_linear_and_mean_preserving(x, a, c):
    y = avgpool_downsample(x, 3)
    assert abs(y.mean() - x.mean()) < 1e-10
    np.testing.assert_allclose(avgpool_downsample(a * x + c, 3), a * y + c, atol=1e-8)


# climatology ---------------------------------------------------------------------

def _every_key_samples(value_fn, years):
    for y in years:
        for m in range(1, 13):
            for h in range(24):
                yield datetime(y, m, 1, h), value_fn(y, m, h)


def test_climatology_identical_states():
    v = np.arange(6.0).reshape(1, 2, 3)
    clim = build_climatology(_every_key_samples(lambda *_: v, [2018]), ["a"])
    assert np.all(clim.fields == v) and clim.complete


def test_climatology_two_point_mean():
    v = np.ones((1, 2, 2))
    clim = build_climatology(_every_key_samples(lambda y, m, h: v + 2 * (y - 2018), [2018, 2019]),
                             ["a"], [2018, 2019])
    assert np.all(clim.lookup(datetime(2021, 5, 3, 7)) == 2.0)


def test_climatology_oracle():
    rng = np.random.default_rng(0)
    samples = []
    for y in (2018, 2019):
        for m in range(1, 13):
            for d in (1, 15):
                for h in range(24):
                    samples.append((datetime(y, m, d, h), rng.normal(size=(2, 3, 4))))
    clim = build_climatology(samples, ["a", "b"])
    for m, h in ((1, 0), (6, 13), (12, 23)):
        group = [v for t, v in samples if t.month == m and t.hour == h]
        expected = sum(group) / len(group)
        np.testing.assert_allclose(clim.fields[m - 1, h], expected, atol=1e-10)


def test_climatology_missing_key_and_file(tmp_path):
    samples = [(datetime(2019, 7, 1, h), np.zeros((1, 2, 2))) for h in range(24)]
    with pytest.raises(GridError):
        build_climatology(samples, ["a"])
    clim = build_climatology(samples, ["a"], strict=False)
    with pytest.raises(GridError):
        clim.lookup(datetime(2019, 8, 1, 0))
    clim.save(tmp_path / "c.npz")
    back = Climatology.load(tmp_path / "c.npz", ["a"])
    assert np.array_equal(back.populated, clim.populated)
    with pytest.raises(GridError):
        Climatology.load(tmp_path / "c.npz", ["b"])
