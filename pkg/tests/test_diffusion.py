import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from regionwx.diffusion import (
    DiffusionError,
    DiT,
    DiTConfig,
    NoiseSchedule,
    diffusion_train_step,
    enmax,
    hybrid_loss,
    p_sample_loop,
    sample,
)


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule.linear(1000)


def _toy_dit(seed=0, **kw):
    torch.manual_seed(seed)
    args = dict(latent_channels=2, cond_channels=3, input_size=(4, 6), patch=2, width=16, depth=2,
                heads=2, mlp_ratio=2.0, freq_dim=16)
    args.update(kw)
    model = DiT(DiTConfig(**args))
    # adaLN-Zero starts as the identity; give every block something to do
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    return model


def test_schedule_invariants(sched):
    b = sched.betas[1:]
    assert sched.T == 1000 and b[0] == 1e-4 and abs(b[-1] - 0.02) < 1e-15
    assert 0 < b[0] < b[-1] < 1
    assert sched.alphas_cumprod[0] == 1.0
    assert np.all(np.diff(sched.alphas_cumprod) < 0)


def test_q_sample_zero_noise(sched):
    x0 = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    t = torch.tensor([1, 500, 1000])
    out = sched.q_sample(x0, t, torch.zeros_like(x0))
    expect = torch.as_tensor(np.sqrt(sched.alphas_cumprod[[1, 500, 1000]]))[:, None, None, None] * x0
    assert torch.equal(out, expect)


def test_q_sample_first_step_bound(sched):
    x0 = torch.randn(4, 2, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    xt = sched.q_sample(x0, torch.ones(4, dtype=torch.long), eps)
    bound = np.sqrt(1e-4) * eps.abs() + (1 - np.sqrt(1 - 1e-4)) * x0.abs() + 1e-15
    assert torch.all((xt - x0).abs() <= bound)


@pytest.mark.parametrize("t", [0, 1001, -3])
def test_timestep_range(sched, t):
    x0 = torch.zeros(1, 1, 2, 2)
    with pytest.raises(DiffusionError):
        sched.q_sample(x0, torch.tensor([t]), x0)


def test_bad_schedules(sched):
    with pytest.raises(DiffusionError):
        NoiseSchedule.linear(0)
    with pytest.raises(DiffusionError):
        NoiseSchedule(np.array([0.1, 1.0]))
    with pytest.raises(DiffusionError):
        sched.respace(1001)


def test_identity_respacing_coefficients():
    s = NoiseSchedule.linear(10)
    r = s.respace(10)
    for name in ("betas", "alphas_cumprod", "posterior_variance", "posterior_mean_coef1",
                 "posterior_mean_coef2", "posterior_log_variance_clipped"):
        np.testing.assert_array_equal(getattr(r, name), getattr(s, name), err_msg=name)
    np.testing.assert_array_equal(r.timestep_map, np.arange(11))


def test_respacing_preserves_cumulative_products(sched):
    r = sched.respace(250)
    assert r.T == 250
    np.testing.assert_allclose(r.alphas_cumprod[1:], sched.alphas_cumprod[r.timestep_map[1:]],
                               rtol=1e-12)
    assert r.timestep_map[1] == 1 and r.timestep_map[-1] == 1000


def test_dit_shapes_and_batch_equivariance():
    model = _toy_dit().eval()
    x = torch.randn(5, 2, 4, 6)
    c = torch.randn(5, 3, 4, 6)
    t = torch.tensor([1, 10, 100, 500, 1000])
    eps, v = model(x, c, t)
    assert eps.shape == x.shape and v.shape == x.shape
    perm = torch.tensor([3, 0, 4, 1, 2])
    eps_p, v_p = model(x[perm], c[perm], t[perm])
    torch.testing.assert_close(eps_p, eps[perm], rtol=1e-5, atol=1e-6)
    torch.testing.assert_close(v_p, v[perm], rtol=1e-5, atol=1e-6)


def test_dit_shape_errors():
    model = _toy_dit()
    with pytest.raises(DiffusionError):
        model(torch.randn(1, 2, 4, 4), torch.randn(1, 3, 4, 6), torch.tensor([3]))
    with pytest.raises(DiffusionError):
        model(torch.randn(1, 2, 4, 6), torch.randn(1, 2, 4, 6), torch.tensor([3]))
    with pytest.raises(DiffusionError):
        DiTConfig(2, 3, (5, 6), patch=2)
    with pytest.raises(DiffusionError):
        DiTConfig(2, 3, (4, 6), width=10, heads=3)


def test_hybrid_loss_at_optimum(sched):
    x0 = torch.randn(6, 2, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([2, 3, 50, 400, 900, 1000])
    xt = sched.q_sample(x0, t, eps)
    parts = hybrid_loss(sched, eps, eps.clone(), -torch.ones_like(x0), x0, xt, t)
    assert parts["mse"].item() == 0.0
    assert abs(parts["vb"].item()) < 1e-8


def test_train_step_reduces_loss():
    model = _toy_dit(seed=1)
    sched = NoiseSchedule.linear(100)
    opt = torch.optim.AdamW(model.parameters(), lr=3e-3, weight_decay=0.0)
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(16, 2, 4, 6)
    cond = torch.randn(16, 3, 4, 6)
    losses = [diffusion_train_step(model, opt, sched, x0, cond, gen)["loss"] for _ in range(150)]
    assert np.mean(losses[-30:]) < np.mean(losses[:30])
    assert all(np.isfinite(losses))


def test_sampling_is_seeded(sched):
    model = _toy_dit()
    cond = torch.randn(1, 3, 4, 6)
    a = sample(model, sched, cond, 20, seed=7)
    b = sample(model, sched, cond, 20, seed=7)
    c = sample(model, sched, cond, 20, seed=8)
    m1 = sample(model, sched, cond, 20, seed=7, member=1)
    assert torch.equal(a, b)
    assert torch.dist(a, c) > 0 and torch.dist(a, m1) > 0
    assert torch.equal(m1, sample(model, sched, cond, 20, seed=7, member=1))
    with pytest.raises(DiffusionError):
        sample(model, sched, cond, 0)


def test_identity_respaced_sampler_matches_full():
    model = _toy_dit(seed=2)
    s = NoiseSchedule.linear(10)
    cond = torch.randn(2, 3, 4, 6, dtype=torch.float64)
    model = model.double()
    shape = (2, 2, 4, 6)
    full = p_sample_loop(model, s, cond, shape, torch.Generator().manual_seed(3), torch.float64)
    resp = p_sample_loop(model, s.respace(10), cond, shape, torch.Generator().manual_seed(3),
                         torch.float64)
    assert torch.equal(full, resp)


def test_enmax_examples():
    z, o = np.zeros((3, 4)), np.ones((3, 4))
    np.testing.assert_array_equal(enmax([z, o]), o)
    np.testing.assert_array_equal(enmax([o]), o)
    with pytest.raises(DiffusionError):
        enmax([])
    with pytest.raises(DiffusionError):
        enmax([z, np.zeros((4, 3))])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_enmax_bruteforce(n, seed):
    rng = np.random.default_rng(seed)
    members = [rng.normal(size=(3, 4)) for _ in range(n)]
    out = enmax(members)
    for i in range(3):
        for j in range(4):
            assert out[i, j] == max(m[i, j] for m in members)
    np.testing.assert_array_equal(out, enmax(members[::-1]))
