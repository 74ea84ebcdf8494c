import numpy as np
import pytest
import torch

from regionwx.config import codec_specs, dit_config, load_config
from regionwx.diffusion import DiT, NoiseSchedule, enmax
from regionwx.grid import R_MIN
from regionwx.precip import (
    DiagnosisError,
    LatentEncoder,
    PrecipDiagnoser,
    build_codec,
    codec_inputs,
    diffusion_dataset,
    parameter_checksum,
    precip_input,
    precip_output,
    train_dit,
    write_diagnosis,
)
from regionwx.store import HOUR, DatasetManifest


@pytest.fixture(scope="module")
def cfg():
    return load_config()


@pytest.fixture(scope="module")
def encoder(cfg):
    specs = codec_specs(cfg)
    return LatentEncoder({k: build_codec(s, seed=i) for i, (k, s) in enumerate(specs.items())})


@pytest.fixture(scope="module")
def diagnoser(cfg, encoder, toy_store, toy_stats):
    torch.manual_seed(0)
    model = DiT(dit_config(cfg))
    return PrecipDiagnoser(encoder, model, NoiseSchedule.linear(1000), toy_stats, toy_store.grid,
                           toy_store.precip_crop_lat)


def _inputs(store, when):
    return store.read("state", when), store.read("tp", when), store.read("cmpas", when - HOUR)


def test_codec_inputs_shapes(cfg, toy_store, toy_stats):
    specs = codec_specs(cfg)
    for cid, spec in specs.items():
        x = codec_inputs(toy_store, toy_stats, cid)
        assert tuple(x.shape[1:]) == (spec.in_channels, *spec.input_shape)
        assert torch.isfinite(x).all()
    with pytest.raises(DiagnosisError):
        codec_inputs(toy_store, toy_stats, "V_z")


def test_precip_normalization_round_trip(toy_stats):
    rate = np.array([[0.0, 0.5], [2.0, 40.0]])
    back = precip_output(precip_input(rate, toy_stats, "cmpas")[0], toy_stats)
    np.testing.assert_allclose(back[rate > 0], rate[rate > 0], rtol=1e-9)
    assert back[0, 0] <= R_MIN * (1 + 1e-9)  # zero rain sits on the floor


def test_frozen_codecs_unchanged_by_dit_training(cfg, encoder, toy_store, toy_stats):
    encoder.fit_scales({k: codec_inputs(toy_store, toy_stats, k)[:8] for k in encoder.codecs})
    before = {k: parameter_checksum(c) for k, c in encoder.codecs.items()}
    cond, target, times = diffusion_dataset(toy_store, toy_stats, encoder)
    assert len(times) == len(toy_store.split("train")) - 1
    assert not cond.requires_grad and not target.requires_grad
    torch.manual_seed(0)
    model = DiT(dit_config(cfg))
    _, losses, _ = train_dit(model, NoiseSchedule.linear(1000), cond, target, 100, batch_size=8)
    assert all(np.isfinite(losses))
    assert {k: parameter_checksum(c) for k, c in encoder.codecs.items()} == before
    assert all(not p.requires_grad for c in encoder.codecs.values() for p in c.parameters())


def test_single_member_is_identity(diagnoser, toy_store):
    args = _inputs(toy_store, toy_store.split("train")[5])
    (member,) = diagnoser.members(*args, n_members=1, seed=3, n_steps=5)
    np.testing.assert_array_equal(diagnoser.diagnose(*args, n_members=1, seed=3, n_steps=5), member)
    assert member.shape == toy_store.precip_grid.shape


def test_member_order_invariance(diagnoser, toy_store):
    args = _inputs(toy_store, toy_store.split("train")[7])
    members = diagnoser.members(*args, n_members=3, seed=1, n_steps=5)
    assert not np.array_equal(members[0], members[1])
    out = diagnoser.diagnose(*args, n_members=3, seed=1, n_steps=5)
    np.testing.assert_array_equal(out, enmax(members[::-1]))
    np.testing.assert_array_equal(out, enmax([members[1], members[2], members[0]]))
    np.testing.assert_array_equal(enmax([members[0]] * 3), members[0])


def test_output_non_negative_over_random_inputs(diagnoser, toy_store, toy_stats):
    rng = np.random.default_rng(0)
    state = toy_store.read("state", toy_store.split("train")[0])
    cmp_shape, tp_shape = toy_store.precip_grid.shape, toy_store.grid.shape
    for i in range(100):
        s = state + rng.normal(size=state.shape) * toy_stats.std[:, None, None]
        tp = rng.exponential(rng.uniform(0.01, 20.0), size=tp_shape) * (rng.random(tp_shape) < 0.4)
        prev = rng.exponential(rng.uniform(0.01, 20.0), size=cmp_shape)
        out = diagnoser.diagnose(s, tp, prev, n_members=2, seed=i, n_steps=2)
        assert out.shape == cmp_shape and np.all(out >= 0) and np.all(np.isfinite(out))


def test_stage_labels(diagnoser, toy_store):
    state, tp, prev = _inputs(toy_store, toy_store.split("train")[3])
    with pytest.raises(DiagnosisError, match="encode stage"):
        diagnoser.diagnose(state[:, :-2], tp, prev, n_steps=2)
    with pytest.raises(DiagnosisError, match="sampling stage failed \\(member 0\\)"):
        diagnoser.diagnose(state, tp, prev, n_steps=5000)
    with pytest.raises(DiagnosisError):
        diagnoser.diagnose(state, tp, prev, n_members=0)


def test_missing_codec(encoder):
    with pytest.raises(DiagnosisError, match="V_p"):
        LatentEncoder({"V_x": encoder.codecs["V_x"], "V_cmpas": encoder.codecs["V_cmpas"]})


def test_write_diagnosis_tags(tmp_path, toy_store):
    when = toy_store.split("train")[4]
    field_ = np.full(toy_store.precip_grid.shape, 1.5)
    members = [field_, field_ * 0.5]
    write_diagnosis(tmp_path / "d", toy_store, when, field_, members, seed=9, n_steps=50)
    man = DatasetManifest.open(tmp_path / "d")
    assert man.tags == {"kind": "diagnosis", "time": when.strftime("%Y-%m-%dT%H"), "seed": 9,
                        "n_members": 2, "n_steps": 50, "combine": "enmax"}
    np.testing.assert_array_equal(man.read("cmpas", when), field_.astype(np.float32))
    assert np.load(tmp_path / "d" / "members.npy").shape == (2, *field_.shape)
