import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from flowgrpo import autodiff as ad
from flowgrpo.flow_matching import analytic_gaussian_velocity
from flowgrpo.model import forward
from flowgrpo.samplers import (
    TimeGrid,
    Trajectory,
    WindowSpec,
    model_velocity,
    ode_step,
    policy_mean,
    replay,
    rollout,
    sde_mean,
    sde_step,
    sigma,
    stack_trajectories,
    stored_logpdf,
    transition_logpdf,
)

from conftest import central_diff, rel_err


def gauss_field(mu=2.0, s=0.5):
    return lambda x, c, t: analytic_gaussian_velocity(x, t, mu, s)


def test_sde_mean_hand_value():
    assert sde_mean(1.0, 0.0, 0.5, 0.1, 0.2) == pytest.approx(0.996, abs=1e-15)


def test_sde_mean_vector_matches_scalar_loop():
    rng = np.random.default_rng(0)
    x, v = rng.standard_normal(6), rng.standard_normal(6)
    out = sde_mean(x, v, 0.35, 0.1, 0.7)
    for i in range(6):
        coef = 0.7**2 / (2 * 0.35)
        assert out[i] == pytest.approx(x[i] + (v[i] + coef * (0.35 * v[i] - x[i])) * 0.1, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.01, 0.99), a=st.floats(0.0, 2.0))
def test_sde_coefficient_identity(t, a):
    # sigma_t^2 / (2 (1 - t)) == a^2 / (2 t)
    s = sigma(t, a)
    assert s * s / (2 * (1 - t)) == pytest.approx(a * a / (2 * t), rel=1e-12, abs=1e-300)


def test_sigma_domain():
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            sigma(bad, 0.3)
    with pytest.raises(ValueError):
        sde_mean(1.0, 0.0, 0.0, 0.1, 0.3)


def test_a_zero_collapse_bit_exact():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        x, v, eps = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3)
        t, dt = rng.uniform(0.01, 0.99), rng.uniform(0.001, 0.2)
        assert np.array_equal(sde_step(x, v, t, dt, 0.0, eps), ode_step(x, v, dt))


def test_window_validation():
    g = TimeGrid(8)
    WindowSpec(1, 6).validate(g)
    assert list(WindowSpec(2, 3).steps()) == [2, 3, 4]
    assert WindowSpec.full(g) == WindowSpec(1, 6)
    for bad in (WindowSpec(0, 2), WindowSpec(6, 2), WindowSpec(1, 0)):
        with pytest.raises(ValueError):
            bad.validate(g)
    with pytest.raises(ValueError):
        TimeGrid(0)


def test_rollout_rows_independent_of_batch(tiny_params):
    rng = np.random.default_rng(2)
    c = rng.standard_normal((5, 2))
    seeds = [np.random.SeedSequence([9, i]) for i in range(5)]
    tr = rollout(tiny_params, c, TimeGrid(8), WindowSpec(2, 3), 0.5, seed=seeds)
    for i in range(5):
        one = rollout(tiny_params, c[i], TimeGrid(8), WindowSpec(2, 3), 0.5, seed=[seeds[i]])
        assert np.array_equal(one.states[:, 0], tr.states[:, i])
    sub = tr.select([1, 3])
    assert np.array_equal(sub.final, tr.final[[1, 3]])


def test_replay_is_bit_exact(tiny_params):
    c = np.random.default_rng(3).standard_normal((4, 2))
    tr = rollout(tiny_params, c, TimeGrid(9), WindowSpec(1, 7), 0.7, seed=5)
    assert np.array_equal(replay(tr, model_velocity(tiny_params)), tr.states)
    # stored means are the behavior means
    for r in tr.sde_records():
        assert np.array_equal(r.mean, sde_mean(r.x, forward(tiny_params, r.x, c, r.t).data, r.t, r.dt, r.a))


def test_trajectory_json_roundtrip(tiny_params):
    tr = rollout(tiny_params, np.ones((3, 2)), TimeGrid(7), WindowSpec(2, 2), 0.3, seed=1)
    back = Trajectory.from_dict(json.loads(json.dumps(tr.to_dict())))
    for name in ("states", "means", "noises", "sigmas", "cond"):
        assert np.array_equal(getattr(back, name), getattr(tr, name))
    assert back.sde_steps == tr.sde_steps and back.grid == tr.grid and back.window == tr.window
    with pytest.raises(ValueError):
        Trajectory.from_dict({**tr.to_dict(), "format": "other"})


def test_stack_requires_shared_grid(tiny_params):
    a = rollout(tiny_params, np.ones((2, 2)), TimeGrid(7), WindowSpec(2, 2), 0.3, seed=1)
    b = rollout(tiny_params, np.ones((3, 2)), TimeGrid(7), WindowSpec(2, 2), 0.3, seed=2)
    assert stack_trajectories([a, b]).n == 5
    c = rollout(tiny_params, np.ones((1, 2)), TimeGrid(8), WindowSpec(2, 2), 0.3, seed=3)
    with pytest.raises(ValueError):
        stack_trajectories([a, c])


def test_transition_logpdf_equals_stored_and_scipy(tiny_params):
    c = np.random.default_rng(4).standard_normal((3, 2))
    tr = rollout(tiny_params, c, TimeGrid(8), WindowSpec(1, 3), 0.4, seed=2)
    for r in tr.sde_records():
        got = transition_logpdf(tiny_params, r, c).data
        assert np.array_equal(got, stored_logpdf(r))
        want = stats.norm.logpdf(r.x_next, r.mean, r.sigma * math.sqrt(r.dt)).sum(axis=1)
        np.testing.assert_allclose(got, want, rtol=1e-12)
    with pytest.raises(ValueError):
        transition_logpdf(tiny_params, tr.record(0), c)


def test_transition_logpdf_gradient(tiny_params):
    c = np.random.default_rng(5).standard_normal((2, 2))
    tr = rollout(tiny_params, c, TimeGrid(6), WindowSpec(1, 2), 0.5, seed=3)
    rec = tr.record(2)

    def value():
        return ad.sum(transition_logpdf(tiny_params, rec, c))

    tiny_params.zero_grad()
    ad.backward(value())
    for name, t in tiny_params.items():
        assert rel_err(t.grad, central_diff(lambda: value().item(), t.data)) < 1e-4, name


def test_policy_mean_per_row_times_match_scalar(tiny_params):
    rng = np.random.default_rng(6)
    x, c, t = rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), np.array([0.2, 0.5, 0.7])
    rows = policy_mean(tiny_params, x, c, t, 0.1, 0.3).data
    for i in range(3):
        single = policy_mean(tiny_params, x[i : i + 1], c[i : i + 1], float(t[i]), 0.1, 0.3).data[0]
        assert np.array_equal(rows[i], single)


def test_ode_terminal_matches_target():
    grid = TimeGrid(200)
    tr = rollout(None, np.zeros((5000, 1)), grid, seed=0, velocity=gauss_field())
    assert stats.kstest(tr.final[:, 0], "norm", args=(2.0, 0.5)).pvalue > 0.01


def test_sde_preserves_marginal_all_interior_steps():
    grid = TimeGrid(200)
    ode = rollout(None, np.zeros((5000, 1)), grid, seed=10, velocity=gauss_field())
    sde = rollout(None, np.zeros((5000, 1)), grid, WindowSpec.full(grid), 0.3, seed=11, velocity=gauss_field())
    assert stats.ks_2samp(ode.final[:, 0], sde.final[:, 0]).pvalue > 0.01


def test_sde_intermediate_marginal_matches_interpolant():
    # x_t under the analytic field with SDE steps stays N(t*mu, (1-t)^2 + t^2 s^2)
    # Euler-Maruyama bias is O(dt); T=400 keeps it well under the KS resolution
    grid = TimeGrid(400)
    tr = rollout(None, np.zeros((10000, 1)), grid, WindowSpec(1, 398), 0.7, seed=12, velocity=gauss_field())
    k = 240
    t = grid.t(k)
    sd = math.sqrt((1 - t) ** 2 + t * t * 0.25)
    assert stats.kstest(tr.states[k, :, 0], "norm", args=(2 * t, sd)).pvalue > 0.01
