"""Finite-difference validation battery for every analytic derivative in the package."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from auxinash.bargaining import PreferenceVector, SolverConfig, build_gradient_set, solve_alpha
from auxinash.diffmodels import (
    QuadraticSuiteSpec,
    fd_hvp,
    finite_difference_grad,
    make_illustrative,
    make_quadratic,
    make_toy_mlp,
)
from auxinash.hypergrad import IhvpConfig, dalpha_dp, hypergradient, mixed_partial_vjp, softmax_chain

TIGHT = SolverConfig(method="newton", inner_tolerance=1e-13, fixed_point_tolerance=1e-13, max_newton_iters=200)


@dataclass
class CheckResult:
    test: str
    analytic: list[float]
    numeric: list[float]
    rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_err <= self.threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = self.passed
        return d


def _result(test, analytic, numeric, threshold) -> CheckResult:
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    err = float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12))
    return CheckResult(test, a.tolist(), n.tolist(), err, threshold)


def _suite_gradients(name, suite, theta, threshold=1e-6) -> list[CheckResult]:
    out = []
    for i in range(suite.num_tasks):
        g = suite.grad(i, theta)
        fd = finite_difference_grad(lambda th: suite.loss(i, th), theta)
        out.append(_result(f"{name}_grad_task{i}", g, fd, threshold))
    return out


def _fd_dalpha(grads, p, h=1e-5):
    cols = []
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = h
        hi = solve_alpha(grads, p + e, TIGHT).alpha
        lo = solve_alpha(grads, p - e, TIGHT).alpha
        cols.append((hi - lo) / (2 * h))
    return np.stack(cols, axis=1)


def run_battery(seed: int = 0) -> list[CheckResult]:
    """Compare each analytic derivative with a central finite difference."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    ill, _, _ = make_illustrative(200, seed)
    results += _suite_gradients("illustrative", ill, rng.standard_normal(2))
    quad = make_quadratic(QuadraticSuiteSpec.random(3, 4, seed=seed))
    theta_q = rng.standard_normal(4)
    results += _suite_gradients("quadratic", quad, theta_q)
    mlp, theta_m = make_toy_mlp(hidden=6, tasks=2, seed=seed, n=64)
    results += _suite_gradients("mlp", mlp, theta_m, threshold=1e-5)

    alpha = rng.uniform(0.5, 1.5, quad.num_tasks)
    v = rng.standard_normal(4)
    grad_lt = lambda th: quad.gradient_matrix(th) @ alpha  # noqa: E731
    results.append(_result("quadratic_hvp", quad.hvp(alpha, theta_q, v), fd_hvp(grad_lt, theta_q, v), 1e-6))

    # mixed partial: d/dalpha of v^T grad L_T(theta, alpha)
    h = 1e-6
    fd_mixed = [
        (v @ quad.gradient_matrix(theta_q) @ (alpha + h * e) - v @ quad.gradient_matrix(theta_q) @ (alpha - h * e)) / (2 * h)
        for e in np.eye(quad.num_tasks)
    ]
    results.append(_result("mixed_partial_vjp", mixed_partial_vjp(quad, theta_q, v), fd_mixed, 1e-5))

    G = rng.standard_normal((5, 3))
    grads = build_gradient_set(G.T)
    prefs = PreferenceVector.from_logits(rng.standard_normal(3))
    weights = solve_alpha(grads, prefs, TIGHT)
    jac = dalpha_dp(grads, prefs, weights).matrix
    results.append(_result("dalpha_dp", jac, _fd_dalpha(grads, prefs.probs), 1e-4))

    g = rng.standard_normal(3)
    f = lambda z: float(PreferenceVector.from_logits(z).probs @ g)  # noqa: E731
    results.append(_result("softmax_chain", softmax_chain(prefs.probs, g), finite_difference_grad(f, prefs.logits), 1e-7))

    results.append(_bilevel_check(rng))
    return results


def _bilevel_check(rng) -> CheckResult:
    # L_V(theta*(alpha(p))) with alpha solved on gradients frozen at theta0
    quad = make_quadratic(QuadraticSuiteSpec.random(2, 4, seed=int(rng.integers(1 << 30))))
    theta0 = rng.standard_normal(4) * 2
    grads0 = quad.gradient_set(theta0)
    val_center = rng.standard_normal(4)

    def inner(p):
        w = solve_alpha(grads0, p, TIGHT)
        return w, quad.weighted_minimizer(w.alpha)

    def val_loss(p):
        return 0.5 * float(np.sum((inner(p)[1] - val_center) ** 2))

    prefs = PreferenceVector.from_probs([0.35, 0.65])
    w, theta_star = inner(prefs.probs)
    res = hypergradient(quad, theta_star, prefs, w, theta_star - val_center, IhvpConfig(mode="exact_solve"), grads=grads0)
    h = 1e-5
    fd = [(val_loss(prefs.probs + h * e) - val_loss(prefs.probs - h * e)) / (2 * h) for e in np.eye(2)]
    return _result("hypergradient_bilevel", res.grad_p, fd, 1e-2)
