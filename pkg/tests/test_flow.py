import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from detailrefine import flow
from detailrefine.errors import DegenerateDensityError, ShapeError
from detailrefine.flow import NoiseSchedule, sde_step

from conftest import random_params


def test_schedule_grid():
    s = NoiseSchedule(10, 0.2)
    np.testing.assert_allclose(s.times(), np.linspace(1, 0, 11))
    tr = s.transitions()
    assert len(tr) == 10 and tr[0][0] == 1.0
    assert all(abs(dt - 0.1) < 1e-12 for _, dt in tr)
    assert min(t for t, _ in tr) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        NoiseSchedule(0)
    with pytest.raises(ValueError):
        NoiseSchedule(5, -0.1)


def test_fm_target_endpoints():
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((2, 4, 4, 3)), rng.standard_normal((2, 4, 4, 3))
    xt, v = flow.fm_target(x0, eps, 0.0)
    np.testing.assert_array_equal(xt, x0)
    xt, _ = flow.fm_target(x0, eps, 1.0)
    np.testing.assert_array_equal(xt, eps)
    np.testing.assert_array_equal(v, eps - x0)
    xt, _ = flow.fm_target(x0, eps, np.array([0.25, 0.75]))
    np.testing.assert_allclose(xt[1], 0.25 * x0[1] + 0.75 * eps[1])
    with pytest.raises(ShapeError):
        flow.fm_target(x0, eps[:1], 0.5)


def test_ode_step_rejects_overshoot():
    x = torch.zeros(1, 2)
    with pytest.raises(ValueError):
        flow.ode_step(x, x, 0.1, 0.2)
    with pytest.raises(ValueError):
        flow.ode_step(x, x, 0.5, 0.0)


def test_log_prob_frozen_values():
    x = torch.tensor([[0.0]], dtype=torch.float64)
    assert float(flow.gaussian_log_prob(x, x, 1.0)[0]) == pytest.approx(-0.9189385332046727, abs=1e-12)
    lp = flow.gaussian_log_prob(torch.tensor([[1.0]], dtype=torch.float64), torch.tensor([[0.5]], dtype=torch.float64), 0.5)
    assert float(lp[0]) == pytest.approx(-0.7257913526447274, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 12), std=st.floats(1e-3, 5.0))
def test_log_prob_matches_scipy(seed, d, std):
    rng = np.random.default_rng(seed)
    x, mu = rng.standard_normal((3, d)), rng.standard_normal((3, d))
    got = flow.gaussian_log_prob(torch.from_numpy(x), torch.from_numpy(mu), std).numpy()
    want = norm.logpdf(x, mu, std).sum(axis=1)
    np.testing.assert_allclose(got, want, rtol=1e-9)


def test_log_prob_point_mass():
    x = torch.ones(2, 3, dtype=torch.float64)
    assert torch.all(flow.gaussian_log_prob(x, x.clone(), 0.0) == 0)
    with pytest.raises(DegenerateDensityError):
        flow.gaussian_log_prob(x, x + 1e-3, 0.0)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(0, 9), eta=st.floats(0.0, 1.0))
def test_sde_mean_expanded_form(seed, k, eta):
    rng = np.random.default_rng(seed)
    t, dt = NoiseSchedule(10, eta).transitions()[k]
    x, v = rng.standard_normal(5), rng.standard_normal(5)
    c = eta * eta * dt / (2 * t)
    want = x - dt * v - c * t * (x + (1 - t) * v)
    np.testing.assert_allclose(flow.sde_mean(x, v, t, dt, eta), want, rtol=1e-12, atol=1e-14)
    assert flow.sde_std(t, dt, eta) == pytest.approx(eta * math.sqrt(dt * t))


def test_sde_with_zero_eta_is_euler():
    rng = np.random.default_rng(1)
    x = torch.from_numpy(rng.standard_normal((1000, 3)))
    v = torch.from_numpy(rng.standard_normal((1000, 3)))
    step = sde_step(x, v, 0.6, 0.1, 0.0)
    assert torch.max(torch.abs(step.sample - flow.ode_step(x, v, 0.6, 0.1))) <= 1e-12
    assert step.std == 0.0 and torch.all(step.log_prob == 0)


def test_sde_step_log_prob_and_noise():
    rng = np.random.default_rng(2)
    x = torch.from_numpy(rng.standard_normal((4, 6)))
    v = torch.from_numpy(rng.standard_normal((4, 6)))
    noise = torch.from_numpy(rng.standard_normal((4, 6)))
    step = sde_step(x, v, 0.5, 0.1, 0.3, noise=noise)
    torch.testing.assert_close(step.sample, step.mean + step.std * noise)
    want = norm.logpdf(step.sample.numpy(), step.mean.numpy(), step.std).sum(1)
    np.testing.assert_allclose(step.log_prob.numpy(), want, rtol=1e-10)
    with pytest.raises(ValueError):
        sde_step(x, v, 0.0, 0.1, 0.3, noise=noise)


def _gaussian_velocity(x, t, m=0.7, s=0.5):
    """Exact conditional velocity when the data are N(m, s^2)."""
    var = (1 - t) ** 2 * s * s + t * t
    centred = x - (1 - t) * m
    return t / var * centred - (m + (1 - t) * s * s / var * centred)


def _terminal(eta, n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.standard_normal((n, 1)))
    for t, dt in NoiseSchedule(10, eta).transitions():
        x = sde_step(x, _gaussian_velocity(x, t), t, dt, eta, rng).sample
    return x.numpy().ravel()


def test_gaussian_flow_sde_matches_ode():
    ode, sde = _terminal(0.0), _terminal(0.2)
    se = sde.std(ddof=1) / math.sqrt(len(sde))
    assert abs(sde.mean() - ode.mean()) < 3 * se
    assert abs(sde.var() / ode.var() - 1) < 0.1


def test_rollout_shapes_and_determinism(tiny_cfg, tiny_quads):
    params = random_params(tiny_cfg, 0)
    sched = NoiseSchedule(4, 0.3)
    a = flow.rollout(params, tiny_cfg, tiny_quads[0], sched, seed=5)
    b = flow.rollout(params, tiny_cfg, tiny_quads[0], sched, seed=5)
    assert a.states.shape == (5, 16, 16, 3) and a.means.shape == (4, 16, 16, 3)
    assert torch.equal(a.states, b.states)
    assert len(a.steps) == 4 and a.steps[-1].sample is not None


def test_rollout_rejects_wrong_size(tiny_cfg, desk_quads):
    with pytest.raises(ShapeError):
        flow.rollout(random_params(tiny_cfg, 0), tiny_cfg, desk_quads[0], NoiseSchedule(2, 0.1))


def test_recomputed_log_probs_match_sampling(tiny_cfg, tiny_quads):
    params = random_params(tiny_cfg, 1)
    cond = flow.Condition.from_quadruple(tiny_quads[1])
    trs = flow.rollout_group(params, tiny_cfg, cond, NoiseSchedule(3, 0.4), 3, seed=9)
    lp = flow.log_prob_under(params, tiny_cfg, cond, trs)
    recorded = torch.stack([tr.log_probs for tr in trs])
    torch.testing.assert_close(lp, recorded, rtol=1e-10, atol=1e-8)
    with pytest.raises(ValueError):
        flow.log_prob_under(params, tiny_cfg, cond, trs, NoiseSchedule(3, 0.5))


def test_shared_noise_groups(tiny_cfg, tiny_quads):
    params = random_params(tiny_cfg, 2)
    cond = flow.Condition.from_quadruple(tiny_quads[2])
    trs = flow.rollout_group(params, tiny_cfg, cond, NoiseSchedule(2, 0.3), 3, seed=1, shared_noise=True)
    assert all(torch.equal(tr.initial_noise, trs[0].initial_noise) for tr in trs)
    assert not torch.equal(trs[0].terminal, trs[1].terminal)
    free = flow.rollout_group(params, tiny_cfg, cond, NoiseSchedule(2, 0.3), 3, seed=1)
    assert not torch.equal(free[0].initial_noise, free[1].initial_noise)
