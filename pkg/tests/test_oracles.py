import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logomarl.autodiff import finite_diff_check
from logomarl.envs import TabularMDP, chain_mdp, random_mdp, tabular_enumerate
from logomarl.oracles import (DirectModel, ErrorInjection, bellman_backup, bellman_residual, direct_state_baseline,
                              ensemble_baseline, lipschitz_constants, matched_hidden, pca_project, state_mse,
                              theorem1_check, time_rollouts, value_iteration)
from logomarl.rng import rng_for
from logomarl.world_model import WorldModel, WorldModelConfig


def test_value_iteration_geometric():
    mdp = TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9)
    assert value_iteration(mdp, tol=1e-10).Q[0, 0] == pytest.approx(10.0, abs=1e-9)


def test_value_iteration_gamma_zero():
    mdp = random_mdp(5, 3, 0.0, rng_for(0, "vi"))
    np.testing.assert_array_equal(value_iteration(mdp).Q, mdp.R)


def test_value_iteration_self_consistent():
    mdp = random_mdp(8, 3, 0.9, rng_for(1, "vi"))
    tol = 1e-8
    q = value_iteration(mdp, tol).Q
    tight = value_iteration(mdp, tol / 10).Q
    assert bellman_residual(mdp, q) < tol
    assert np.abs(q - tight).max() <= 10 * tol
    with pytest.raises(ValueError):
        value_iteration(mdp, 0.0)


def test_exact_max_targets_equal_backup():
    """Sampled one-step targets r + gamma * max_a' Q*(s', a') average to the backup, which is Q*."""
    mdp = chain_mdp(6, gamma=0.9, slip=0.0)
    q = value_iteration(mdp, 1e-12).Q
    for s, a, dist, r in tabular_enumerate(mdp):
        s_next = int(np.argmax(dist))
        assert r + mdp.gamma * q[s_next].max() == pytest.approx(bellman_backup(mdp, q)[s, a], abs=1e-12)
        assert bellman_backup(mdp, q)[s, a] == pytest.approx(q[s, a], abs=1e-10)


def test_bound_arithmetic():
    assert ErrorInjection(0.1, 0.05, 0.02, L_r=1.0, L_Q=10.0).bound(0.9) == pytest.approx(1.068)
    with pytest.raises(ValueError):
        ErrorInjection(-0.1, 0, 0)


def test_bound_zero_injection():
    mdp = random_mdp(16, 4, 0.9, rng_for(0, "bound-mdp"))
    rep = theorem1_check(mdp, ErrorInjection(0.0, 0.0, 0.0), 20)
    assert rep.max_error == 0.0 and rep.bound == 0.0 and rep.passed


def test_bound_holds_over_trials():
    mdp = random_mdp(16, 4, 0.9, rng_for(0, "bound-mdp"))
    rep = theorem1_check(mdp, ErrorInjection(0.1, 0.05, 0.02), 1000)
    assert rep.violations == 0 and rep.max_error > 0
    assert "PASS" in rep.summary()
    L_r, L_Q = lipschitz_constants(mdp, value_iteration(mdp, 1e-12).Q)
    assert rep.bound == pytest.approx((L_r + 0.9 * L_Q) * 0.1 + 0.05 + 0.9 * 0.02)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0, 0.5))
def test_bound_never_violated(seed, es, er, eq):
    mdp = random_mdp(6, 2, 0.8, rng_for(seed, "prop-mdp"), smooth=bool(seed % 2))
    assert theorem1_check(mdp, ErrorInjection(es, er, eq), 30, seed).passed


def test_direct_baseline_zero_steps_and_determinism(spec, toy_split):
    train, val = toy_split
    cfg = WorldModelConfig(hidden=8, steps=0, seed=2)
    res = direct_state_baseline(train, val, cfg)
    assert res.mse == state_mse(DirectModel(spec, res.model.hidden, 2), val)
    cfg = WorldModelConfig(hidden=8, steps=30, seed=2, batch_size=32)
    a, b = direct_state_baseline(train, val, cfg), direct_state_baseline(train, val, cfg)
    assert a.mse == b.mse
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()


def test_equal_parameter_budget(spec):
    for hidden in (32, 128):
        budget = WorldModel.param_count(spec, hidden)
        h = matched_hidden(spec, budget)
        assert abs(DirectModel(spec, h).n_params - budget) / budget < 0.02


def test_direct_model_gradients(spec, toy_data):
    model = DirectModel(spec, 6, seed=0)
    rng = np.random.default_rng(0)
    for v in model.params.values():
        v += rng.normal(0, 0.1, v.shape).astype(v.dtype)
    idx = np.arange(5)
    batch = {"state": toy_data.state[idx], "action": toy_data.action[idx], "next_state": toy_data.next_state[idx]}
    assert finite_diff_check(model.loss_graph(), batch, h=1e-4) <= 1e-4


def test_ensemble_identical_members_and_k1(spec, toy_split):
    train, val = toy_split
    cfg = WorldModelConfig(hidden=8, steps=10, seed=0, batch_size=32)
    same = ensemble_baseline(train, cfg, k=3, hidden=8, seeds=[4, 4, 4])
    _, std = same.predict(val.state, val.action)
    assert np.all(std == 0.0)
    one = ensemble_baseline(train, cfg, k=1, hidden=8)
    single = direct_state_baseline(train, val, cfg, budget=DirectModel(spec, 8).n_params)
    np.testing.assert_array_equal(one.predict(val.state, val.action)[0], single.model.predict(val.state, val.action))


def test_timing_report(small_wm, toy_split):
    train, val = toy_split
    ens = ensemble_baseline(train, WorldModelConfig(hidden=32, steps=0), k=2)
    rep = time_rollouts(small_wm.model, ens, val, n_traj=50, steps=3, repeats=3)
    assert len(rep.logo_runs) == 3 and rep.logo_seconds > 0
    assert rep.ratio == pytest.approx(rep.ensemble_seconds / rep.logo_seconds)


def test_pca_line_and_square():
    t = np.linspace(-1, 1, 20)[:, None]
    line = t * np.array([[1.0, 2.0, -1.0]]) + np.array([0.5, 0.0, 1.0])
    res = pca_project(line, 2)
    assert res.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-9)
    assert res.rank_deficient
    sq = pca_project(np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float), 2)
    np.testing.assert_allclose(sq.explained_variance_ratio, [0.5, 0.5], atol=1e-9)


def test_pca_matches_eigendecomposition():
    X = np.random.default_rng(0).normal(size=(50, 8)) * np.arange(1, 9)
    res = pca_project(X, 3)
    Xc = X - X.mean(0)
    w, V = np.linalg.eigh(Xc.T @ Xc / 49)
    top = V[:, ::-1][:, :3]
    ref = Xc @ top
    signs = np.sign(np.sum(ref * res.projected, axis=0))
    np.testing.assert_allclose(res.projected, ref * signs, atol=1e-6)
    np.testing.assert_allclose(res.components @ res.components.T, np.eye(3), atol=1e-8)
    with pytest.raises(ValueError):
        pca_project(X[:3], 3)
