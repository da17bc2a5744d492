"""Hypergradient of the validation loss with respect to the preference vector.

The chain is  dL_V/dp = -(dL_V/dtheta) H^{-1} G  [G^T G + L0]^{-1} L1
with ``H = sum_i alpha_i Hess(loss_i)`` (alpha frozen), ``G`` the task
gradients, ``L0 = diag(p / alpha^2)`` and ``L1 = diag(1 / alpha)``.  The
training loss is read as ``L_T(theta, alpha) = sum_i alpha_i loss_i(theta)``,
so its mixed second derivative is exactly ``G``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from auxinash.bargaining import BargainingWeights, PreferenceVector, TaskGradientSet
from auxinash.errors import ConfigError, IhvpDivergedError, NotConvergedError, NumericalError

IHVP_MODES = ("neumann", "exact_solve", "identity")
MAX_EXACT_DIM = 512


@dataclass(frozen=True)
class IhvpConfig:
    neumann_steps: int = 3
    # None: 0.9 / ||H|| estimated by power iteration, clamped to [1e-6, 1]
    neumann_scale: float | None = None
    mode: str = "neumann"
    power_iters: int = 10

    def __post_init__(self):
        if self.mode not in IHVP_MODES:
            raise ConfigError(f"unknown ihvp mode {self.mode!r}; expected one of {IHVP_MODES}")
        if self.neumann_steps < 1:
            raise ConfigError("neumann_steps must be >= 1")
        if self.neumann_scale is not None and not self.neumann_scale > 0:
            raise ConfigError("neumann_scale must be > 0")


@dataclass(frozen=True)
class AlphaJacobian:
    matrix: np.ndarray
    lambda0: np.ndarray
    lambda1: np.ndarray


@dataclass
class HypergradResult:
    grad_p: np.ndarray
    grad_logits: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def dalpha_dp(
    grads: TaskGradientSet,
    prefs: PreferenceVector,
    weights: BargainingWeights,
    allow_unconverged: bool = False,
) -> AlphaJacobian:
    """Jacobian of the bargaining weights w.r.t. the (unconstrained) preference vector."""
    if not weights.converged and not allow_unconverged:
        raise NotConvergedError("dalpha/dp needs converged bargaining weights")
    alpha = np.asarray(weights.alpha, dtype=float)
    p = prefs.probs if isinstance(prefs, PreferenceVector) else np.asarray(prefs, dtype=float)
    if np.any(alpha <= 0) or np.any(p <= 0):
        raise ConfigError("alpha and p must be strictly positive")
    gram = np.asarray(grads.gram, dtype=float)
    if not np.all(np.isfinite(gram)):
        raise NumericalError("non-finite Gram matrix")
    lambda0 = p / alpha**2
    lambda1 = 1.0 / alpha
    A = gram + np.diag(lambda0)
    try:
        factor = cho_factor(A)
    except np.linalg.LinAlgError:
        raise NumericalError("G^T G + Lambda0 is not positive definite") from None
    return AlphaJacobian(matrix=cho_solve(factor, np.diag(lambda1)), lambda0=lambda0, lambda1=lambda1)


def estimate_operator_norm(hvp_oracle: Callable, dim: int, iters: int = 10, seed: int = 0) -> float:
    """Power-iteration estimate of ``||H||`` for a symmetric operator."""
    v = np.random.default_rng(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = hvp_oracle(v)
        est = float(np.linalg.norm(w))
        if est == 0.0 or not np.isfinite(est):
            break
        v = w / est
    return est


def neumann_scale(hvp_oracle: Callable, dim: int, cfg: IhvpConfig) -> float:
    if cfg.neumann_scale is not None:
        return cfg.neumann_scale
    est = estimate_operator_norm(hvp_oracle, dim, cfg.power_iters)
    if est <= 0 or not np.isfinite(est):
        return 1.0
    return float(np.clip(0.9 / est, 1e-6, 1.0))


def ihvp(hvp_oracle: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray, cfg: IhvpConfig | None = None) -> np.ndarray:
    """Approximate ``H^{-1} rhs`` given only ``v -> H v``.

    ``neumann`` returns ``eta * sum_{j<J} (I - eta H)^j rhs`` with ``J = neumann_steps``.
    """
    cfg = cfg or IhvpConfig()
    rhs = np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(rhs)):
        raise ConfigError("rhs must be finite")
    d = rhs.size

    def apply(v):
        out = np.asarray(hvp_oracle(v), dtype=float)
        if not np.all(np.isfinite(out)):
            raise IhvpDivergedError("Hessian-vector oracle returned non-finite values")
        return out

    if cfg.mode == "identity":
        return rhs.copy()
    if cfg.mode == "exact_solve":
        if d > MAX_EXACT_DIM:
            raise ConfigError(f"exact_solve is limited to d <= {MAX_EXACT_DIM}")
        H = np.stack([apply(e) for e in np.eye(d)], axis=1)
        H = 0.5 * (H + H.T)
        if np.linalg.cond(H) > 1.0 / np.finfo(float).eps:
            raise IhvpDivergedError("Hessian is singular")
        return np.linalg.solve(H, rhs)

    eta = neumann_scale(apply, d, cfg)
    v = rhs.copy()
    acc = rhs.copy()
    limit = 1e6 * max(np.linalg.norm(rhs), np.finfo(float).tiny)
    for _ in range(cfg.neumann_steps - 1):
        v = v - eta * apply(v)
        acc += v
        if np.linalg.norm(acc) > limit:
            raise IhvpDivergedError("Neumann series diverged; reduce neumann_scale")
    return eta * acc


def mixed_partial_vjp(suite, theta: np.ndarray, v: np.ndarray, batch=None) -> np.ndarray:
    """``v^T d^2 L_T / dtheta dalpha^T``, i.e. the vector ``(v^T g_1, ..., v^T g_K)``."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size != suite.param_dim:
        raise ConfigError(f"v has length {v.size}, expected {suite.param_dim}")
    return suite.gradient_matrix(theta, batch).T @ v


def softmax_chain(probs: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``p = softmax(z)`` back to the logits ``z``."""
    return probs * (grad_p - probs @ grad_p)


def hypergradient(
    suite,
    theta: np.ndarray,
    prefs: PreferenceVector,
    weights: BargainingWeights,
    val_grad: np.ndarray,
    cfg: IhvpConfig | None = None,
    batch=None,
    grads: TaskGradientSet | None = None,
) -> HypergradResult:
    """Evaluate dL_V/dp and its logit counterpart.

    ``grads`` is the gradient set the bargaining weights were solved on; it
    defaults to the suite's gradients at ``theta`` on ``batch``.
    """
    cfg = cfg or IhvpConfig()
    if not weights.converged:
        raise NotConvergedError("hypergradient needs converged bargaining weights")
    theta = np.asarray(theta, dtype=float)
    val_grad = np.asarray(val_grad, dtype=float)
    if grads is None:
        grads = suite.gradient_set(theta, batch)
    alpha = np.asarray(weights.alpha)

    w = ihvp(lambda v: suite.hvp(alpha, theta, v, batch), val_grad, cfg)
    m = mixed_partial_vjp(suite, theta, w, batch)
    jac = dalpha_dp(grads, prefs, weights)
    grad_p = -(jac.matrix.T @ m)
    grad_logits = softmax_chain(prefs.probs, grad_p)
    return HypergradResult(
        grad_p=grad_p,
        grad_logits=grad_logits,
        diagnostics={
            "ihvp_mode": cfg.mode,
            "ihvp_steps": cfg.neumann_steps if cfg.mode == "neumann" else 0,
            "val_grad_norm": float(np.linalg.norm(val_grad)),
            "ihvp_norm": float(np.linalg.norm(w)),
            "mixed_norm": float(np.linalg.norm(m)),
        },
    )

