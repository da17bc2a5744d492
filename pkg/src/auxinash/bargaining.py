"""Bargaining-game representation of task gradients and the weighted fixed-point solver.

Given task gradients stacked as the columns of ``G`` and a preference vector
``p`` on the simplex, the bargaining weights ``alpha`` solve

    G^T G alpha = p / alpha        (element-wise reciprocal)

and the update direction is ``G @ alpha``.  The solver follows the
concave-convex route: define ``beta_i = g_i^T G alpha`` and
``phi_i = log alpha_i + log beta_i - log p_i``; minimise ``sum_i phi_i``
subject to ``phi_i >= 0``.  The constraints are convex, the objective is
concave, so we first solve a convex relaxation (objective ``sum_i beta_i``)
and then run CCP iterations, each one minimising the linearised objective
over the same convex set with a log-barrier Newton method.

The fixed point is also the stationary point of the strictly convex function
``0.5 ||G alpha||^2 - sum_i p_i log alpha_i``, so a damped Newton method on
that function is offered as a faster alternative (``method="newton"``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from auxinash.errors import ConfigError, NotConvergedError, ParetoStationaryError, SolverDivergedError

ArrayLike = Sequence[float] | np.ndarray
SOLVER_METHODS = ("ccp", "newton")


@dataclass(frozen=True)
class TaskGradientSet:
    """Task gradients as a ``d x K`` matrix (column ``i`` is ``g_i``) with its Gram matrix."""

    gradients: np.ndarray
    gram: np.ndarray
    min_eigenvalue: float

    @property
    def num_tasks(self) -> int:
        return self.gradients.shape[1]

    @property
    def dim(self) -> int:
        return self.gradients.shape[0]

    def is_near_singular(self, eps: float = 1e-10) -> bool:
        return self.min_eigenvalue < eps

    @classmethod
    def from_matrix(cls, G: np.ndarray) -> "TaskGradientSet":
        G = np.asarray(G, dtype=float)
        if G.ndim != 2:
            raise ConfigError(f"gradient matrix must be 2-D, got shape {G.shape}")
        return build_gradient_set(list(G.T))


def build_gradient_set(gradients: Sequence[ArrayLike] | np.ndarray) -> TaskGradientSet:
    """Stack ``K`` gradient vectors of length ``d`` and cache their Gram matrix.

    Near-singular Gram matrices are accepted; ``min_eigenvalue`` records how
    close the set is to linear dependence.
    """
    if len(gradients) == 0:
        raise ConfigError("at least one task gradient is required")
    vecs = [np.asarray(g, dtype=float).ravel() for g in gradients]
    d = vecs[0].size
    if d == 0:
        raise ConfigError("gradients must have length >= 1")
    for i, g in enumerate(vecs):
        if g.size != d:
            raise ConfigError(f"gradient {i} has length {g.size}, expected {d}")
    G = np.stack(vecs, axis=1)
    if not np.all(np.isfinite(G)):
        raise ConfigError("gradients contain non-finite entries")
    gram = G.T @ G
    gram = 0.5 * (gram + gram.T)
    min_eig = float(np.linalg.eigvalsh(gram)[0])
    G.setflags(write=False)
    gram.setflags(write=False)
    return TaskGradientSet(gradients=G, gram=gram, min_eigenvalue=min_eig)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass(frozen=True)
class PreferenceVector:
    """Strictly positive simplex point with its logit parameterisation."""

    logits: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_logits(cls, logits: ArrayLike) -> "PreferenceVector":
        z = np.asarray(logits, dtype=float).ravel().copy()
        if z.size == 0 or not np.all(np.isfinite(z)):
            raise ConfigError("logits must be a non-empty finite vector")
        p = _softmax(z)
        if np.any(p <= 0):
            raise ConfigError("logit spread too large: a preference underflowed to zero")
        z.setflags(write=False)
        p.setflags(write=False)
        return cls(logits=z, probs=p)

    @classmethod
    def from_probs(cls, probs: ArrayLike, atol: float = 1e-6) -> "PreferenceVector":
        p = np.asarray(probs, dtype=float).ravel()
        if p.size == 0 or not np.all(np.isfinite(p)):
            raise ConfigError("preference must be a non-empty finite vector")
        if np.any(p <= 0):
            raise ConfigError("preference entries must be strictly positive")
        if abs(p.sum() - 1.0) > atol:
            raise ConfigError(f"preference must sum to 1, got {p.sum()!r}")
        logp = np.log(p / p.sum())
        return cls.from_logits(logp - logp.mean())

    @classmethod
    def uniform(cls, num_tasks: int) -> "PreferenceVector":
        if num_tasks < 1:
            raise ConfigError("num_tasks must be >= 1")
        return cls.from_logits(np.zeros(num_tasks))

    @property
    def num_tasks(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class BargainingWeights:
    alpha: np.ndarray
    residual_inf: float
    iterations_used: int
    converged: bool
    regularized: bool = False
    history: tuple[float, ...] = field(default=(), repr=False)


@dataclass(frozen=True)
class SolverConfig:
    method: str = "ccp"
    max_ccp_iters: int = 20
    inner_tolerance: float = 1e-8
    fixed_point_tolerance: float = 1e-6
    gram_regularization: float = 1e-10
    max_newton_iters: int = 100

    def __post_init__(self):
        if self.method not in SOLVER_METHODS:
            raise ConfigError(f"method must be one of {SOLVER_METHODS}, got {self.method!r}")
        if self.max_ccp_iters < 1:
            raise ConfigError("max_ccp_iters must be >= 1")
        for name in ("inner_tolerance", "fixed_point_tolerance", "gram_regularization"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")


def _as_weights(prefs: PreferenceVector | ArrayLike) -> np.ndarray:
    # Raw positive weights are accepted so that the symmetric (all-ones)
    # Nash-MTL game can be solved with the same code path.
    if isinstance(prefs, PreferenceVector):
        return prefs.probs
    w = np.asarray(prefs, dtype=float).ravel()
    if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ConfigError("bargaining weights must be finite and strictly positive")
    return w


def fixed_point_residual(grads: TaskGradientSet, prefs: PreferenceVector | ArrayLike, alpha: ArrayLike) -> float:
    """Return ``max_i |(G^T G alpha)_i - p_i / alpha_i|``."""
    a = np.asarray(alpha, dtype=float).ravel()
    w = _as_weights(prefs)
    if a.size != grads.num_tasks or w.size != grads.num_tasks:
        raise ConfigError("alpha / preference length does not match the number of tasks")
    if np.any(a <= 0):
        raise ConfigError("alpha must be strictly positive")
    return float(np.max(np.abs(grads.gram @ a - w / a)))


# ---------------------------------------------------------------------------
# convex subproblem:  min c^T a   s.t.  log a_i + log (M a)_i - log w_i >= 0
# ---------------------------------------------------------------------------


def _constraints(M, logw, a):
    b = M @ a
    if a.min() <= 0 or b.min() <= 0:
        return None, None
    g = np.log(a) + np.log(b) - logw
    if g.min() <= 0:
        return None, None
    return b, g


def _max_positive_step(x, dx):
    neg = dx < 0
    if not neg.any():
        return 1.0
    return min(1.0, 0.99 * float(np.min(-x[neg] / dx[neg])))


def _scaled_solve(H, rhs):
    """Solve ``H x = rhs`` for symmetric PSD ``H`` after symmetric diagonal scaling."""
    d = np.sqrt(np.diag(H))
    if not np.all(np.isfinite(d)) or d.min() <= 0:
        raise SolverDivergedError("degenerate barrier Hessian")
    Hs = H / d[:, None] / d[None, :]
    try:
        y = np.linalg.solve(Hs, rhs / d)
    except np.linalg.LinAlgError:
        y = np.linalg.lstsq(Hs, rhs / d, rcond=None)[0]
    return y / d


def _barrier_minimize(M, logw, c, a, tol, max_newton, growth=200.0):
    """Log-barrier method for one convex subproblem; ``a`` must be strictly feasible."""
    K = a.size
    b, g = _constraints(M, logw, a)
    diag = np.diag_indices(K)
    # start with a duality gap comparable to the objective value
    t = K / max(abs(c @ a), 1e-12)
    final = False
    while True:
        t_target = K / (tol * max(1.0, abs(c @ a)))
        if t >= t_target:
            t, final = t_target, True
        for _ in range(max_newton):
            inv_a, inv_b = 1.0 / a, 1.0 / b
            # rows of J are the gradients of the constraint functions g_i
            J = M * inv_b[:, None]
            J[diag] += inv_a
            Jg = J / g[:, None]
            grad = t * c - Jg.sum(axis=0)
            H = Jg.T @ Jg
            H[diag] += inv_a**2 / g
            H += (M.T * (inv_b**2 / g)) @ M
            step = -_scaled_solve(H, grad)
            dec = -grad @ step
            if not np.isfinite(dec):
                raise SolverDivergedError("non-finite Newton decrement")
            # intermediate centring can be sloppy, the last one cannot
            if dec <= (1e-12 if final else 1e-4):
                break
            f0 = t * (c @ a) - np.log(g).sum()
            s = min(_max_positive_step(a, step), _max_positive_step(b, M @ step))
            while s > 1e-16:
                an = a + s * step
                bn, gn = _constraints(M, logw, an)
                if gn is not None and t * (c @ an) - np.log(gn).sum() <= f0 - 0.25 * s * dec:
                    break
                s *= 0.5
            else:
                break
            a, b, g = an, bn, gn
        if final:
            return a
        t *= growth


def _strictly_feasible_start(M, w, a0):
    """Scale a positive point with ``M a > 0`` into the interior of the constraint set."""
    a = a0
    b = M @ a
    if np.any(b <= 0):
        # phase I: maximise s  s.t.  M a >= s, a >= s, sum(a) = 1
        K = a.size
        cost = np.zeros(K + 1)
        cost[-1] = -1.0
        A_ub = np.hstack([-M, np.ones((K, 1))])
        A_ub = np.vstack([A_ub, np.hstack([-np.eye(K), np.ones((K, 1))])])
        res = linprog(
            cost,
            A_ub=A_ub,
            b_ub=np.zeros(2 * K),
            A_eq=np.append(np.ones(K), 0.0)[None, :],
            b_eq=[1.0],
            bounds=[(0, None)] * K + [(None, 1.0)],
            method="highs",
        )
        if res.status != 0 or res.x[-1] <= 0:
            raise SolverDivergedError("could not find a point with positive utilities")
        a = res.x[:K]
        b = M @ a
    scale = 1.1 * np.sqrt(np.max(w / (a * b)))
    return a * scale


def solve_alpha(
    grads: TaskGradientSet,
    prefs: PreferenceVector | ArrayLike,
    cfg: SolverConfig | None = None,
    warm_start: np.ndarray | None = None,
) -> BargainingWeights:
    """Solve ``G^T G alpha = p / alpha`` for ``alpha > 0``.

    Raises ParetoStationaryError when every gradient is zero.  ``warm_start``
    (e.g. the previous training step's alpha) is tried first when it gives
    positive utilities.  If every CCP path stalls, the best iterate is
    returned with ``converged=False``.
    """
    cfg = cfg or SolverConfig()
    w = _as_weights(prefs)
    K = grads.num_tasks
    if w.size != K:
        raise ConfigError(f"preference has {w.size} entries for {K} tasks")
    M = np.array(grads.gram, dtype=float)
    if not np.all(np.isfinite(M)):
        raise SolverDivergedError("non-finite Gram matrix")
    if np.max(np.abs(M)) == 0.0:
        raise ParetoStationaryError("all task gradients are zero")

    regularized = grads.min_eigenvalue < cfg.gram_regularization
    if regularized:
        M[np.diag_indices(K)] += cfg.gram_regularization

    diag = np.maximum(np.diag(M), np.finfo(float).tiny)
    init = np.clip(np.sqrt(w) / np.sqrt(diag), 1e-6, 1e6)
    warm = None
    if warm_start is not None:
        warm = np.asarray(warm_start, dtype=float).ravel()
        if not (warm.size == K and np.all(warm > 0) and np.all(np.isfinite(warm))):
            warm = None

    if cfg.method == "newton":
        paths = [(init, None)] if warm is None else [(warm, None), (init, None)]
    else:
        # (start point, use the sum-of-utilities relaxation first?)
        paths = [(init, True), (init, False)]
        if warm is not None and np.all(M @ warm > 0):
            paths.insert(0, (warm, False))

    best = None
    history: list[float] = []
    iters = 0
    failure = None
    for start, relax in paths:
        try:
            if cfg.method == "newton":
                a, r, n, h = _newton_path(M, w, start, cfg)
            else:
                a, r, n, h = _ccp_path(M, w, start, relax, cfg)
        except SolverDivergedError as exc:
            failure = exc
            continue
        iters += n
        history.extend(h)
        if best is None or r < best[1]:
            best = (a, r)
        if r <= cfg.fixed_point_tolerance:
            break
    if best is None:
        raise failure

    alpha = best[0].copy()
    alpha.setflags(write=False)
    return BargainingWeights(
        alpha=alpha,
        residual_inf=best[1],
        iterations_used=iters,
        converged=bool(best[1] <= cfg.fixed_point_tolerance),
        regularized=bool(regularized),
        history=tuple(history),
    )


def _ccp_path(M, w, start, relax, cfg):
    """One relaxation + CCP run.  Returns (best alpha, its residual, subproblems solved, residual history)."""
    logw = np.log(w)

    def residual(a):
        return float(np.max(np.abs(M @ a - w / a)))

    a = start
    best_a, best_r = a, np.inf
    history = []
    prev_r = np.inf
    for it in range(cfg.max_ccp_iters):
        if it == 0 and relax:
            # convex relaxation: linear objective sum_i beta_i(alpha)
            c = M.sum(axis=0)
        else:
            # linearise the concave objective sum_i phi_i at the current iterate
            c = 1.0 / a + M.T @ (1.0 / (M @ a))
        a = _barrier_minimize(M, logw, c, _strictly_feasible_start(M, w, a), cfg.inner_tolerance, cfg.max_newton_iters)
        if not np.all(np.isfinite(a)):
            raise SolverDivergedError("non-finite CCP iterate")
        r = residual(a)
        history.append(r)
        if r < best_r:
            best_a, best_r = a, r
        if r <= cfg.fixed_point_tolerance or r > 0.99 * prev_r:
            break
        prev_r = r
    return best_a, best_r, len(history), history


def _newton_path(M, w, start, cfg):
    """Damped Newton on ``0.5 a^T M a - sum w log a``; its gradient is the fixed-point residual."""
    logw_floor = np.finfo(float).tiny

    def phi(a):
        return 0.5 * a @ M @ a - w @ np.log(a)

    a = np.array(start, dtype=float)
    f = phi(a)
    target = min(cfg.inner_tolerance, cfg.fixed_point_tolerance)
    history = []
    best_a, best_r = a, np.inf
    for _ in range(cfg.max_newton_iters):
        F = M @ a - w / a
        r = float(np.max(np.abs(F)))
        history.append(r)
        if r < best_r:
            best_a, best_r = a, r
        if r <= target:
            break
        H = M + np.diag(w / a**2)
        try:
            step = -np.linalg.solve(H, F)
        except np.linalg.LinAlgError:
            raise SolverDivergedError("singular Newton system") from None
        t = _max_positive_step(a, step)
        slope = F @ step
        while t > 1e-12:
            cand = a + t * step
            if np.all(cand > logw_floor):
                fc = phi(cand)
                # near the solution the decrease in phi drops below rounding,
                # so a clear drop in the residual is accepted as well
                if fc <= f + 1e-4 * t * slope or np.max(np.abs(M @ cand - w / cand)) < 0.5 * r:
                    break
            t *= 0.5
        else:
            break
        a, f = cand, fc
    if not np.all(np.isfinite(best_a)):
        raise SolverDivergedError("non-finite Newton iterate")
    return best_a, best_r, len(history), history


def update_direction(grads: TaskGradientSet, weights: BargainingWeights, allow_unconverged: bool = False) -> np.ndarray:
    """Return ``G @ alpha``; unit norm at a converged solution."""
    if not weights.converged and not allow_unconverged:
        raise NotConvergedError(f"bargaining weights not converged (residual {weights.residual_inf:.3e})")
    return grads.gradients @ weights.alpha
