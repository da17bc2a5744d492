import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import random_gradients
from strategies import gradient_problems

from auxinash.bargaining import BargainingWeights, PreferenceVector, SolverConfig, build_gradient_set, solve_alpha
from auxinash.diffmodels import LinearRegressionSuite, QuadraticSuiteSpec, make_illustrative, make_quadratic
from auxinash.errors import ConfigError, IhvpDivergedError, NotConvergedError
from auxinash.hypergrad import (
    IhvpConfig,
    dalpha_dp,
    estimate_operator_norm,
    hypergradient,
    ihvp,
    mixed_partial_vjp,
    neumann_scale,
    softmax_chain,
)

TIGHT = SolverConfig(method="newton", inner_tolerance=1e-13, fixed_point_tolerance=1e-13, max_newton_iters=200)


def _weights(G, p, cfg=TIGHT):
    grads = build_gradient_set(G.T)
    prefs = PreferenceVector.from_probs(p)
    return grads, prefs, solve_alpha(grads, prefs, cfg)


def _fd_jacobian(grads, p, h=1e-5):
    cols = []
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = h
        cols.append((solve_alpha(grads, p + e, TIGHT).alpha - solve_alpha(grads, p - e, TIGHT).alpha) / (2 * h))
    return np.stack(cols, axis=1)


# --- config ------------------------------------------------------------------


def test_ihvp_config_validation():
    with pytest.raises(ConfigError):
        IhvpConfig(neumann_steps=0)
    with pytest.raises(ConfigError):
        IhvpConfig(neumann_scale=0.0)
    with pytest.raises(ConfigError):
        IhvpConfig(mode="cg")
    assert IhvpConfig().neumann_steps == 3


# --- dalpha_dp ---------------------------------------------------------------


def test_jacobian_identity_gram():
    grads, prefs, w = _weights(np.eye(2), np.array([0.25, 0.75]))
    jac = dalpha_dp(grads, prefs, w)
    np.testing.assert_allclose(jac.matrix, np.diag([1.0, 0.5773502691896258]), atol=1e-10)


def test_jacobian_scalar():
    grads = build_gradient_set([[2.0]])
    w = BargainingWeights(alpha=np.array([0.5]), residual_inf=0.0, iterations_used=0, converged=True)
    jac = dalpha_dp(grads, PreferenceVector.from_probs([1.0]), w)
    np.testing.assert_allclose(jac.lambda0, [4.0])
    np.testing.assert_allclose(jac.lambda1, [2.0])
    np.testing.assert_allclose(jac.matrix, [[0.25]], atol=1e-15)


def test_jacobian_random_k3_matches_fd():
    rng = np.random.default_rng(8)
    G = random_gradients(rng, 3, 4)
    grads, prefs, w = _weights(G, rng.dirichlet(np.ones(3)))
    jac = dalpha_dp(grads, prefs, w).matrix
    fd = _fd_jacobian(grads, prefs.probs)
    assert np.max(np.abs(jac - fd)) / np.max(np.abs(fd)) <= 1e-4


@given(gradient_problems())
def test_jacobian_pieces_consistent(problem):
    G, p = problem
    grads, prefs, w = _weights(G, p)
    jac = dalpha_dp(grads, prefs, w)
    assert np.all(jac.lambda0 > 0) and np.all(jac.lambda1 > 0)
    rebuilt = np.linalg.solve(grads.gram + np.diag(jac.lambda0), np.diag(jac.lambda1))
    np.testing.assert_allclose(jac.matrix, rebuilt, rtol=0, atol=1e-10 * max(1.0, np.abs(rebuilt).max()))


@given(gradient_problems(max_k=4), st.integers(0, 2**31 - 1))
def test_implicit_equation_preserved_to_first_order(problem, seed):
    G, p = problem
    grads, prefs, w = _weights(G, p)
    jac = dalpha_dp(grads, prefs, w).matrix
    delta = np.random.default_rng(seed).standard_normal(p.size)
    ratios = []
    for t in (1e-2, 1e-3, 1e-4):
        pt = p + t * delta * p / 10  # stay positive
        at = w.alpha + t * jac @ (delta * p / 10)
        res = np.max(np.abs(grads.gram @ at - pt / at))
        ratios.append(res / t)
    assert ratios[2] < ratios[0] or ratios[0] < 1e-9
    assert ratios[2] < 1e-3


def test_jacobian_refuses_unconverged():
    grads, prefs, w = _weights(np.eye(2), np.array([0.5, 0.5]))
    bad = BargainingWeights(alpha=w.alpha, residual_inf=1.0, iterations_used=1, converged=False)
    with pytest.raises(NotConvergedError):
        dalpha_dp(grads, prefs, bad)
    dalpha_dp(grads, prefs, bad, allow_unconverged=True)


# --- ihvp --------------------------------------------------------------------


@pytest.mark.parametrize("steps", [1, 2, 5])
def test_neumann_identity_exact(steps):
    rhs = np.array([1.0, -2.0, 3.0])
    out = ihvp(lambda v: v, rhs, IhvpConfig(neumann_steps=steps, neumann_scale=1.0))
    np.testing.assert_array_equal(out, rhs)


def test_neumann_scalar_geometric():
    out = ihvp(lambda v: 2 * v, np.array([1.0]), IhvpConfig(neumann_steps=3, neumann_scale=0.25))
    assert out[0] == pytest.approx(0.4375, abs=1e-15)


def test_modes():
    H = np.array([[3.0, 1.0], [1.0, 2.0]])
    rhs = np.array([1.0, 1.0])
    np.testing.assert_allclose(ihvp(lambda v: H @ v, rhs, IhvpConfig(mode="exact_solve")), np.linalg.solve(H, rhs))
    np.testing.assert_array_equal(ihvp(lambda v: H @ v, rhs, IhvpConfig(mode="identity")), rhs)


def test_random_spd_neumann_monotone():
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    H = Q @ np.diag(rng.uniform(1.0, 4.0, 5)) @ Q.T
    rhs = rng.standard_normal(5)
    exact = np.linalg.solve(H, rhs)
    eta = 0.9 / np.linalg.norm(H, 2)
    errs = [np.linalg.norm(ihvp(lambda v: H @ v, rhs, IhvpConfig(neumann_steps=J, neumann_scale=eta)) - exact) for J in range(1, 65)]
    # monotone until the rounding floor is reached
    above_floor = [e for e in errs if e > 1e-13 * np.linalg.norm(exact)]
    assert all(b < a for a, b in zip(above_floor, above_floor[1:]))
    assert errs[-1] < 1e-6 * np.linalg.norm(exact)


def test_default_scale_from_power_iteration():
    H = np.diag([4.0, 1.0, 0.5])
    est = estimate_operator_norm(lambda v: H @ v, 3, iters=50)
    assert est == pytest.approx(4.0, rel=1e-6)
    assert neumann_scale(lambda v: H @ v, 3, IhvpConfig(power_iters=50)) == pytest.approx(0.9 / 4.0, rel=1e-6)
    # clamped for tiny operators
    assert neumann_scale(lambda v: 1e-9 * v, 3, IhvpConfig()) == 1.0


def test_ihvp_errors():
    with pytest.raises(IhvpDivergedError):
        ihvp(lambda v: np.full_like(v, np.nan), np.ones(2), IhvpConfig(mode="exact_solve"))
    with pytest.raises(IhvpDivergedError):
        ihvp(lambda v: np.zeros_like(v), np.ones(2), IhvpConfig(mode="exact_solve"))
    with pytest.raises(IhvpDivergedError):
        ihvp(lambda v: -5 * v, np.ones(2), IhvpConfig(neumann_steps=50, neumann_scale=1.0))
    with pytest.raises(ConfigError):
        ihvp(lambda v: v, np.array([np.inf]))


# --- mixed partial / softmax -------------------------------------------------


def test_mixed_partial_examples():
    suite = make_quadratic(QuadraticSuiteSpec((np.eye(2), np.eye(2)), (np.array([-1.0, 0.0]), np.array([0.0, -1.0]))))
    theta = np.zeros(2)  # gradients e_1 and e_2
    np.testing.assert_allclose(mixed_partial_vjp(suite, theta, suite.grad(0, theta)), [1.0, 0.0])
    np.testing.assert_array_equal(mixed_partial_vjp(suite, theta, np.zeros(2)), [0.0, 0.0])
    with pytest.raises(ConfigError):
        mixed_partial_vjp(suite, theta, np.zeros(3))


def test_mixed_partial_matches_fd():
    rng = np.random.default_rng(1)
    suite = make_quadratic(QuadraticSuiteSpec.random(3, 4, seed=1))
    theta, v, alpha = rng.standard_normal(4), rng.standard_normal(4), rng.uniform(0.5, 2, 3)
    h = 1e-6
    fd = [(v @ suite.gradient_matrix(theta) @ (alpha + h * e) - v @ suite.gradient_matrix(theta) @ (alpha - h * e)) / (2 * h) for e in np.eye(3)]
    out = mixed_partial_vjp(suite, theta, v)
    assert np.linalg.norm(out - fd) / np.linalg.norm(fd) <= 1e-5


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.integers(0, 1000))
def test_softmax_chain_nullspace(z, seed):
    p = PreferenceVector.from_logits(z).probs
    g = np.random.default_rng(seed).standard_normal(p.size)
    out = softmax_chain(p, g)
    assert abs(out.sum()) <= 1e-8 * max(1.0, np.abs(g).max())
    # constants are annihilated
    np.testing.assert_allclose(softmax_chain(p, g + 3.0), out, atol=1e-12)


# --- hypergradient -----------------------------------------------------------


def test_identical_tasks_give_no_preference_signal():
    A = np.diag([1.0, 2.0])
    c = np.array([1.0, -1.0])
    suite = make_quadratic(QuadraticSuiteSpec((A, A, A), (c, c, c)))
    theta = np.array([0.3, 0.4])
    grads = suite.gradient_set(theta)
    prefs = PreferenceVector.uniform(3)
    w = solve_alpha(grads, prefs)
    res = hypergradient(suite, theta, prefs, w, np.array([1.0, 2.0]), IhvpConfig(mode="exact_solve"))
    np.testing.assert_allclose(res.grad_p, res.grad_p[0], rtol=1e-6)
    np.testing.assert_allclose(res.grad_logits, 0.0, atol=1e-8)


def test_scalar_bilevel_hand_derived_constant():
    # l_1 = (theta - 1)^2, l_2 = 0.5 (theta + 1)^2, gradients frozen at theta0 = 2: g = (2, 3).
    # d = 1 gives ||G alpha|| = 1 and alpha_i = p_i / g_i, so dalpha_i/dp_j = delta_ij / g_i - p_i / (2 g_i).
    # theta*(alpha) = sum a_i alpha_i c_i / sum a_i alpha_i = 0.5 at p = (0.5, 0.5);
    # dtheta*/dalpha = (1.5, -2.25); L_V = 0.5 (theta - 1)^2 so dL_V/dtheta = -0.5.
    # grad_p = -0.5 * (1.5, -2.25) @ [[0.375, -0.125], [-1/12, 0.25]] = (-0.375, 0.375).
    expected = np.array([-0.375, 0.375])
    suite = make_quadratic(QuadraticSuiteSpec((np.array([[2.0]]), np.array([[1.0]])), (np.array([1.0]), np.array([-1.0]))))
    grads0 = suite.gradient_set(np.array([2.0]))
    prefs = PreferenceVector.uniform(2)
    w = solve_alpha(grads0, prefs, TIGHT)
    theta_star = suite.weighted_minimizer(w.alpha)
    # d = 1 makes the Gram singular, so the 1e-10 diagonal shift perturbs alpha at ~1e-11
    assert theta_star[0] == pytest.approx(0.5, abs=1e-10)
    res = hypergradient(suite, theta_star, prefs, w, theta_star - 1.0, IhvpConfig(mode="exact_solve"), grads=grads0)
    np.testing.assert_allclose(res.grad_p, expected, atol=1e-9)


def test_diagnostics_and_unconverged_guard():
    suite = make_quadratic(QuadraticSuiteSpec.random(2, 3, seed=0))
    theta = np.ones(3) * 2
    prefs = PreferenceVector.uniform(2)
    w = solve_alpha(suite.gradient_set(theta), prefs)
    res = hypergradient(suite, theta, prefs, w, np.ones(3))
    assert res.diagnostics["ihvp_steps"] == 3 and res.diagnostics["ihvp_mode"] == "neumann"
    bad = BargainingWeights(alpha=w.alpha, residual_inf=1.0, iterations_used=1, converged=False)
    with pytest.raises(NotConvergedError):
        hypergradient(suite, theta, prefs, bad, np.ones(3))


def test_harmful_task_sign_on_illustrative_problem():
    suite, _, heldout = make_illustrative(1000, 0)
    val = LinearRegressionSuite.from_dataset(heldout)
    theta = np.zeros(2)
    prefs = PreferenceVector.uniform(3)
    w = solve_alpha(suite.gradient_set(theta), prefs)
    res = hypergradient(suite, theta, prefs, w, val.grad(0, theta), IhvpConfig(mode="exact_solve"))
    assert res.grad_p[2] > 0
