import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import grid_min_norm, projected_gradient_min_norm

from auxinash.bargaining import BargainingWeights, PreferenceVector, build_gradient_set, solve_alpha
from auxinash.diffmodels import LinearRegressionSuite, QuadraticSuiteSpec, make_illustrative, make_quadratic, make_toy_mlp, steering_quadratic
from auxinash.errors import ConfigError, ParetoStationaryError
from auxinash.trainer import (
    TrainConfig,
    delta_percent,
    estimate_smoothness,
    format_float,
    min_norm_element,
    pareto_stationarity,
    project_simplex,
    theorem1_step_size,
    train,
    with_overrides,
)

THEOREM1 = TrainConfig(step_mode="theorem1", pref_lr=0.0, total_outer_iters=200)


# --- config ------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"inner_lr": 0.0},
        {"pref_lr": -1.0},
        {"pref_update_period": 0},
        {"inner_optimizer": "rmsprop"},
        {"pref_update_rule": "mirror"},
        {"val_source": "test_set"},
        {"step_mode": "armijo"},
        {"step_mode": "theorem1", "inner_optimizer": "adam"},
        {"step_mode": "theorem1", "smoothness": -1.0},
        {"on_stationary": "ignore"},
        {"pref_optimizer": "lbfgs"},
        {"batch_size": 0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_config_defaults_follow_the_recipe():
    cfg = TrainConfig()
    assert (cfg.inner_lr, cfg.pref_lr, cfg.pref_update_period) == (1e-2, 5e-3, 25)
    assert cfg.adam_betas == (0.9, 0.999) and cfg.adam_eps == 1e-8
    assert cfg.pref_optimizer == "sgd" and cfg.pref_momentum == 0.9
    assert cfg.val_source == "separate_train_batch"
    assert cfg.ihvp.neumann_steps == 3
    assert with_overrides(cfg, seed=3).seed == 3


# --- small helpers -----------------------------------------------------------


def test_theorem1_step_examples():
    w = BargainingWeights(alpha=np.array([1.0]), residual_inf=0.0, iterations_used=0, converged=True)
    assert theorem1_step_size(PreferenceVector.from_probs([1.0]), w, 2.0) == 0.5
    a = np.sqrt([0.5, 0.5])
    w2 = BargainingWeights(alpha=a, residual_inf=0.0, iterations_used=0, converged=True)
    assert theorem1_step_size(PreferenceVector.uniform(2), w2, 1.0) == pytest.approx(math.sqrt(0.5), abs=1e-15)
    with pytest.raises(ConfigError):
        theorem1_step_size(PreferenceVector.uniform(2), w2, 0.0)
    with pytest.raises(ConfigError):
        theorem1_step_size(PreferenceVector.uniform(2), np.array([1.0, -1.0]), 1.0)


def test_theorem1_step_two_routes():
    rng = np.random.default_rng(0)
    G = rng.standard_normal((5, 3))
    grads = build_gradient_set(G.T)
    prefs = PreferenceVector.from_logits(rng.standard_normal(3))
    w = solve_alpha(grads, prefs)
    mu = theorem1_step_size(prefs, w, 2.0)
    utilities = G.T @ (G @ w.alpha)
    assert mu * 2.0 * 3 == pytest.approx(np.sum(utilities), rel=1e-8 + 1e-6)
    assert mu * 2.0 * 3 == pytest.approx(np.sum(prefs.probs / w.alpha), rel=1e-12)


def test_pareto_stationarity_examples():
    g = np.array([1.0, 2.0])
    _, combo = pareto_stationarity(np.stack([g, -g], axis=1))
    assert combo == pytest.approx(0.0, abs=1e-12)
    w, _ = min_norm_element(np.stack([g, -g], axis=1))
    np.testing.assert_allclose(w, [0.5, 0.5])
    sigma, combo = pareto_stationarity(np.eye(2))
    assert sigma == pytest.approx(1.0) and combo == pytest.approx(math.sqrt(0.5), abs=1e-12)


def test_pareto_stationarity_random_against_grid():
    G = np.random.default_rng(5).standard_normal((4, 3))
    _, combo = pareto_stationarity(build_gradient_set(G.T))
    assert abs(combo - grid_min_norm(G, step=1e-3)) <= 1e-3


@given(st.integers(0, 10_000), st.integers(2, 7), st.integers(1, 8))
def test_min_norm_against_projected_gradient(seed, K, d):
    G = np.random.default_rng(seed).standard_normal((d, K))
    w, combo = min_norm_element(G)
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-12
    assert combo == pytest.approx(np.linalg.norm(G @ w), abs=1e-14)
    _, ref = projected_gradient_min_norm(G, iters=3000)
    assert combo <= ref + 1e-9


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(0.0, 0.1))
def test_project_simplex(v, floor):
    v = np.array(v)
    if floor * v.size > 1:
        floor = 0.0
    p = project_simplex(v, floor)
    assert abs(p.sum() - 1) <= 1e-12
    assert np.all(p >= floor - 1e-15)


def test_delta_percent_examples():
    assert delta_percent([0.3, 2.0], [0.3, 2.0], [1, 0]).delta == 0.0
    rep = delta_percent([0.9], [1.0], [0])
    assert rep.delta == pytest.approx(-0.10, abs=1e-15) and rep.percent == pytest.approx(-10.0, abs=1e-12)
    assert delta_percent([0.88, 0.5], [0.80, 0.4], [1, 0]).delta == pytest.approx(0.075, abs=1e-15)
    with pytest.raises(ConfigError):
        delta_percent([1.0], [0.0], [0])
    with pytest.raises(ConfigError):
        delta_percent([1.0, 2.0], [1.0], [0])


def test_format_float_round_trips():
    for x in (0.1, 1 / 3, 1e-300, -2.5e17):
        assert float(format_float(x)) == x


def test_smoothness_estimate_on_quadratic():
    suite = steering_quadratic()
    L = estimate_smoothness(suite, np.zeros(2))
    assert L == pytest.approx(1.1 * suite.smoothness_bound, rel=1e-6)


# --- training loop -----------------------------------------------------------


def test_single_task_descent():
    suite = make_quadratic(QuadraticSuiteSpec((np.diag([1.0, 3.0]),), (np.array([1.0, -1.0]),)))
    cfg = TrainConfig(inner_lr=0.05, total_outer_iters=4)
    traj = train(suite, cfg, np.array([4.0, 3.0]))
    losses = traj.column("losses")[:, 0]
    far = losses > 0.05  # unit-norm steps of 0.05 overshoot only near the optimum
    assert np.all(np.diff(losses[far]) < 0)
    # single player: alpha = 1 / ||g||
    rec = traj.records[3]
    g = suite.grad(0, rec.theta)
    assert rec.alpha[0] == pytest.approx(1.0 / np.linalg.norm(g), rel=1e-5)


def test_theorem1_descent_and_vanishing_step():
    suite = steering_quadratic()
    traj = train(suite, THEOREM1, np.array([2.0, 2.0]))
    mean_loss = traj.column("losses").mean(axis=1)
    slack = 4 * np.finfo(float).eps * mean_loss[:-1]
    assert np.all(np.diff(mean_loss) <= slack)
    mu = traj.column("mu")
    assert mu[-1] < 1e-3 * mu[0]
    assert traj.status == "pareto_stationary"
    assert traj.smoothness == suite.smoothness_bound


def test_halting_stops_updates():
    suite = steering_quadratic()
    traj = train(suite, THEOREM1, np.array([2.0, 2.0]))
    last = traj.records[-1]
    # the halting step itself is not recorded, and theta after the last record is final
    _, combo = pareto_stationarity(suite.gradient_set(traj.final_theta))
    assert combo < THEOREM1.stationarity_tol
    assert np.allclose(traj.final_theta, last.theta - last.mu * last.direction)


@pytest.mark.parametrize("start", [np.zeros(2), np.array([0.5, 0.5])])
def test_degenerate_start_raises(start):
    # zero gradients at the origin; opposed gradients on the segment between the centres
    suite = make_quadratic(QuadraticSuiteSpec((np.eye(2), np.eye(2)), (np.zeros(2), np.ones(2))))
    with pytest.raises(ParetoStationaryError):
        train(suite, TrainConfig(total_outer_iters=2), start)


def test_trajectory_bookkeeping_and_csv(tmp_path):
    suite, _, _ = make_illustrative(200, 0)
    cfg = TrainConfig(inner_optimizer="adam", batch_size=64, total_outer_iters=3, pref_update_period=5, on_stationary="skip")
    traj = train(suite, cfg, np.zeros(2))
    assert len(traj) == 15 and traj.pref_updates == 3
    path = traj.to_csv(tmp_path / "t.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == (
        ["step", "loss_0", "loss_1", "loss_2", "p_0", "p_1", "p_2", "alpha_0", "alpha_1", "alpha_2"]
        + ["residual", "mu", "sigma_min", "min_norm_combo", "val_loss"]
    )
    assert len(rows) == 16
    assert float(rows[1][1]) == traj.records[0].losses[0]
    side = json.loads(traj.write_sidecar(tmp_path / "t.json", cfg.to_dict()).read_text())
    assert side["seed"] == 0 and side["steps"] == 15 and "git_revision" in side
    assert side["config"]["ihvp"]["neumann_steps"] == 3


def test_determinism():
    suite, _, _ = make_illustrative(200, 1)
    cfg = TrainConfig(inner_optimizer="adam", batch_size=32, total_outer_iters=4, pref_update_period=5, seed=9, on_stationary="skip")
    a = train(suite, cfg, np.zeros(2))
    b = train(suite, cfg, np.zeros(2))
    assert list(map(list, a.rows())) == list(map(list, b.rows()))
    assert np.array_equal(a.final_p, b.final_p)


@given(st.integers(0, 1000), st.sampled_from(["softmax_logits", "projected_euclidean"]), st.sampled_from(["sgd", "adam"]))
def test_preferences_stay_on_simplex(seed, rule, opt):
    suite, theta0 = make_toy_mlp(hidden=4, tasks=3, seed=seed % 7, n=32)
    cfg = TrainConfig(
        pref_lr=0.5, pref_update_rule=rule, pref_optimizer=opt, total_outer_iters=4, pref_update_period=2, seed=seed, on_stationary="skip"
    )
    traj = train(suite, cfg, theta0)
    for p in [r.p for r in traj.records] + [traj.final_p]:
        assert np.all(p > 0)
        assert abs(p.sum() - 1) <= 1e-12
        if rule == "projected_euclidean":
            assert np.all(p >= cfg.pref_floor - 1e-12)


def test_preferences_move_with_large_rate():
    suite, _, _ = make_illustrative(500, 0)
    cfg = TrainConfig(pref_lr=1.0, total_outer_iters=5, pref_update_period=1, batch_size=128)
    traj = train(suite, cfg, np.zeros(2))
    assert not np.allclose(traj.final_p, 1 / 3)


def test_heldout_mode_uses_val_suite():
    suite, _, heldout = make_illustrative(100, 0)
    with pytest.raises(ConfigError):
        train(suite, TrainConfig(val_source="heldout_set"), np.zeros(2))
    val = LinearRegressionSuite.from_dataset(heldout)
    traj = train(suite, TrainConfig(val_source="heldout_set", total_outer_iters=2, pref_update_period=3), np.zeros(2), val_suite=val)
    assert traj.records[0].val_loss == pytest.approx(val.loss(0, np.zeros(2)))


def test_nash_mtl_degeneracy():
    suite, theta0 = make_toy_mlp(hidden=5, tasks=3, seed=2, n=40)
    cfg = TrainConfig(pref_lr=0.0, total_outer_iters=2, pref_update_period=10)
    traj = train(suite, cfg, theta0)
    for r in traj.records:
        G = suite.gradient_matrix(r.theta)
        ref = G @ solve_alpha(build_gradient_set(G.T), np.ones(3)).alpha
        cos = r.direction @ ref / np.linalg.norm(r.direction) / np.linalg.norm(ref)
        assert math.acos(min(1.0, cos)) <= 1e-6 or np.linalg.norm(r.direction / np.linalg.norm(r.direction) - ref / np.linalg.norm(ref)) <= 1e-6


def test_steering_monotone_in_preference():
    suite = steering_quadratic()
    ends = []
    for p1 in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9):
        traj = train(suite, THEOREM1, np.array([2.0, 2.0]), PreferenceVector.from_probs([p1, 1 - p1]))
        ends.append(suite.losses(traj.final_theta))
    ends = np.array(ends)
    assert np.all(np.diff(ends[:, 0]) <= 0)
    assert np.all(np.diff(ends[:, 1]) >= 0)
    gaps = [np.linalg.norm(ends[i] - ends[j]) for i in range(9) for j in range(i + 1, 9)]
    assert min(gaps) > 1e-4


@pytest.mark.parametrize("policy", ["skip", "reuse"])
def test_stationary_policies_keep_going(policy):
    # K=3 in R^2 near the Pareto segment: many batches are exactly stationary
    suite, _, _ = make_illustrative(300, 0)
    cfg = TrainConfig(inner_optimizer="adam", batch_size=64, total_outer_iters=8, pref_update_period=25, on_stationary=policy, pref_lr=0.0)
    traj = train(suite, cfg, np.array([0.4, -0.4]))
    assert len(traj) == 200 and traj.status == "completed"
    assert traj.skipped_steps > 0
    if policy == "skip":
        skipped = [r for r in traj.records if not np.any(r.alpha)]
        assert all(r.mu == 0.0 for r in skipped)


def test_halt_policy_stops_on_stationary_batch():
    suite, _, _ = make_illustrative(300, 0)
    cfg = TrainConfig(inner_optimizer="adam", batch_size=64, total_outer_iters=8, pref_update_period=25, pref_lr=0.0)
    traj = train(suite, cfg, np.array([0.4, -0.4]))
    assert traj.status == "pareto_stationary"
    assert len(traj) < 200


def test_dimension_checks():
    suite = steering_quadratic()
    with pytest.raises(ConfigError):
        train(suite, TrainConfig(), np.zeros(3))
    with pytest.raises(ConfigError):
        train(suite, TrainConfig(), np.zeros(2), PreferenceVector.uniform(3))
