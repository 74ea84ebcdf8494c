from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import acc_oracle, contingency_oracle, rmse_oracle
from regionwx.grid import Climatology, GridSpec
from regionwx.metrics import (
    ContingencyCounts,
    MetricError,
    MetricRow,
    contingency,
    evaluate_precipitation,
    evaluate_rollout,
    far,
    lat_weights,
    pod,
    read_table,
    ts,
    weighted_acc,
    weighted_rmse,
    write_table,
)

LATS = np.linspace(10.0, 55.0, 16)
fields = arrays(np.float64, (6, 5), elements=st.floats(-50, 50, allow_subnormal=False))


def test_lat_weights():
    full = GridSpec.full()
    w = lat_weights(full.latitudes)
    assert w.shape == (full.n_lat, 1)
    assert abs(w[list(full.latitudes).index(60.0), 0] - 0.5) < 1e-15
    assert np.all((w > 0) & (w <= 1))
    assert abs(lat_weights(LATS, normalize=True).mean() - 1.0) < 1e-12


def test_rmse_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(16, 16))
    w = lat_weights(LATS)
    assert weighted_rmse(a, a, w) == 0.0
    assert weighted_rmse(a + 2.0, a, lat_weights(np.zeros(16))) == 2.0
    b = rng.normal(size=(16, 16))
    assert abs(weighted_rmse(a, b, w) - rmse_oracle(a, b, LATS)) < 1e-10


def test_acc_examples():
    rng = np.random.default_rng(1)
    a, b, c = rng.normal(size=(3, 16, 16))
    w = lat_weights(LATS)
    assert abs(weighted_acc(a, a, c, w) - 1.0) < 1e-12
    assert abs(weighted_acc(c + (a - c), c - (a - c), c, w) + 1.0) < 1e-12
    assert abs(weighted_acc(a, b, c, w) - acc_oracle(a, b, c, LATS)) < 1e-10


def test_acc_field_mean_mode():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 6, 5))
    da, db = a - a.mean(), b - b.mean()
    expect = np.sum(da * db) / np.sqrt(np.sum(da**2) * np.sum(db**2))
    assert abs(weighted_acc(a, b, weights=1.0, mode="field_mean") - expect) < 1e-12
    with pytest.raises(MetricError):
        weighted_acc(a, b, None, 1.0)
    with pytest.raises(MetricError):
        weighted_acc(a, b, a, 1.0, mode="other")


def test_acc_zero_variance():
    a = np.ones((4, 4))
    with pytest.raises(MetricError, match="zero-variance"):
        weighted_acc(a, np.random.default_rng(0).normal(size=(4, 4)), a, 1.0)


def test_input_errors():
    a = np.zeros((4, 4))
    with pytest.raises(MetricError):
        weighted_rmse(a, np.zeros((4, 5)), 1.0)
    bad = a.copy()
    bad[1, 1] = np.nan
    with pytest.raises(MetricError, match="NaN"):
        weighted_rmse(bad, a, 1.0)
    with pytest.raises(MetricError):
        weighted_acc(a, bad, a, 1.0)
    with pytest.raises(MetricError):
        contingency(a, a, -1.0)
    with pytest.raises(MetricError):
        contingency(a, np.zeros(3), 1.0)


@settings(max_examples=60, deadline=None)
@given(fields, fields, st.floats(-10, 10))
def test_rmse_symmetry_and_scaling(p, o, c):
    w = lat_weights(LATS[:6])
    r = weighted_rmse(p, o, w)
    assert weighted_rmse(o, p, w) == pytest.approx(r, rel=1e-12, abs=1e-12)
    assert weighted_rmse(c * p, c * o, w) == pytest.approx(abs(c) * r, rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(fields, fields, fields, st.floats(-100, 100), st.floats(0.1, 10))
def test_acc_invariances(p, o, clim, shift, scale):
    w = lat_weights(LATS[:6])
    a, b = p - clim, o - clim
    wm = lambda f: np.sum(w * f) / np.sum(w * np.ones_like(f))  # noqa: E731
    assume(np.sum(w * (a - wm(a)) ** 2) > 1e-6 and np.sum(w * (b - wm(b)) ** 2) > 1e-6)
    acc = weighted_acc(p, o, clim, w)
    assert -1.0 <= acc <= 1.0
    assert weighted_acc(p + shift, o + shift, clim + shift, w) == pytest.approx(acc, abs=1e-8)
    assert weighted_acc(p + shift, o + shift, clim, w) == pytest.approx(acc, abs=1e-8)
    assert weighted_acc(clim + scale * a, clim + scale * b, clim, w) == pytest.approx(acc, abs=1e-8)


def test_contingency_examples():
    rng = np.random.default_rng(3)
    f = rng.exponential(2.0, size=(8, 8))
    c = contingency(f, f, 1.0)
    assert c.false_alarms == c.misses == 0
    c = contingency(np.full((4, 4), 5.0), np.zeros((4, 4)), 1.0)
    assert (c.false_alarms, c.hits, c.misses, c.true_negatives) == (16, 0, 0, 0)
    p, o = rng.integers(0, 2, (8, 8)).astype(float), rng.integers(0, 2, (8, 8)).astype(float)
    c = contingency(p, o, 1.0)
    assert (c.hits, c.false_alarms, c.misses, c.true_negatives) == contingency_oracle(p, o, 1.0)
    assert contingency(np.array([1.0]), np.array([1.0]), 1.0).hits == 1   # >= threshold


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (7, 9), elements=st.floats(0, 30)),
       arrays(np.float64, (7, 9), elements=st.floats(0, 30)), st.sampled_from([0.1, 1.0, 5.0, 10.0]))
def test_contingency_properties(p, o, thr):
    c = contingency(p, o, thr)
    assert c.total == p.size
    assert (c.hits, c.false_alarms, c.misses, c.true_negatives) == contingency_oracle(p, o, thr)
    if ts(c) is not None:
        assert ts(c) <= pod(c) if pod(c) is not None else ts(c) == 0.0


def test_scores():
    c = ContingencyCounts(2, 1, 1, 10, 1.0)
    assert ts(c) == 0.5 and pod(c) == 2 / 3 and far(c) == 1 / 3
    c = ContingencyCounts(5, 0, 0, 0, 1.0)
    assert ts(c) == pod(c) == 1.0 and far(c) == 0.0
    c = ContingencyCounts(0, 0, 0, 7, 1.0)
    assert ts(c) is None and pod(c) is None and far(c) is None
    with pytest.raises(MetricError):
        ContingencyCounts(0, 0, 0, 1, 1.0) + ContingencyCounts(0, 0, 0, 1, 5.0)


def test_table_round_trip(tmp_path):
    rows = [MetricRow("2mt", 24, "rmse", 0.123456789012345, 4), MetricRow("precip", 0, "ts@10", None, 3)]
    write_table(rows, tmp_path / "m.csv")
    assert read_table(tmp_path / "m.csv") == rows
    assert "undefined" in (tmp_path / "m.csv").read_text()


def _clim(names, shape, rng):
    return Climatology(tuple(names), rng.normal(size=(12, 24, len(names), *shape)),
                       np.ones((12, 24), dtype=bool))


def test_rollout_identity_and_composition():
    rng = np.random.default_rng(4)
    names = ["2mt", "u10"]
    lats = LATS[:6]
    clim = _clim(names, (6, 5), rng)
    t0 = datetime(2021, 7, 1)
    truth_fields = {t0 + timedelta(hours=h): rng.normal(size=(2, 6, 5)) for h in range(1, 7)}
    truth = truth_fields.__getitem__
    same = {lead: [(t0 + timedelta(hours=lead), truth_fields[t0 + timedelta(hours=lead)])]
            for lead in (1, 3, 6)}
    rows, cov = evaluate_rollout(same, truth, clim, names, [1, 3, 6], names, lats)
    assert cov == 1.0
    for r in rows:
        assert r.value == (0.0 if r.metric == "rmse" else pytest.approx(1.0, abs=1e-12))

    fc = {3: [(t0 + timedelta(hours=3), rng.normal(size=(2, 6, 5))),
              (t0 + timedelta(hours=4), rng.normal(size=(2, 6, 5))),
              (t0 + timedelta(hours=99), rng.normal(size=(2, 6, 5)))]}
    rows, cov = evaluate_rollout(fc, truth, clim, ["u10"], [3], names, lats)
    assert cov == pytest.approx(2 / 3)
    w = lat_weights(lats)
    pairs = fc[3][:2]
    rmse = np.mean([weighted_rmse(f[1], truth(t)[1], w) for t, f in pairs])
    acc = np.mean([weighted_acc(f[1], truth(t)[1], clim.lookup(t)[1], w) for t, f in pairs])
    got = {r.metric: r for r in rows}
    assert got["rmse"].value == pytest.approx(rmse, abs=1e-12) and got["rmse"].n_samples == 2
    assert got["acc"].value == pytest.approx(acc, abs=1e-12)


def test_precipitation_rows():
    rng = np.random.default_rng(5)
    pairs = [(rng.exponential(3, (8, 8)), rng.exponential(3, (8, 8))) for _ in range(3)]
    rows = evaluate_precipitation(pairs)
    names = {r.metric for r in rows}
    assert {"ts@10", "pod@10", "far@10", "ts@0.1"} <= names
    total = sum((contingency(p, o, 10.0) for p, o in pairs[1:]), contingency(*pairs[0], 10.0))
    ts10 = next(r for r in rows if r.metric == "ts@10")
    assert ts10.value == ts(total) and ts10.n_samples == 3
