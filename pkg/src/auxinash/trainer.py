"""The AuxiNash training loop, Pareto-stationarity diagnostics and the Delta-% metric."""

from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from auxinash.bargaining import (
    BargainingWeights,
    PreferenceVector,
    SolverConfig,
    TaskGradientSet,
    solve_alpha,
)
from auxinash.errors import ConfigError, NumericalError, ParetoStationaryError, SolverDivergedError
from auxinash.hypergrad import IhvpConfig, hypergradient

log = logging.getLogger(__name__)

OPTIMIZERS = ("plain_sgd", "adam")
PREF_RULES = ("softmax_logits", "projected_euclidean")
VAL_SOURCES = ("separate_train_batch", "heldout_set")
STEP_MODES = ("fixed_lr", "theorem1")
STATIONARY_POLICIES = ("halt", "skip", "reuse")
PREF_OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    inner_lr: float = 1e-2
    pref_lr: float = 5e-3
    pref_update_period: int = 25
    total_outer_iters: int = 10
    inner_optimizer: str = "plain_sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    pref_update_rule: str = "softmax_logits"
    pref_optimizer: str = "sgd"
    pref_momentum: float = 0.9
    pref_floor: float = 1e-3
    val_source: str = "separate_train_batch"
    step_mode: str = "fixed_lr"
    # L for theorem1 mode; None means estimate it from HVP probes
    smoothness: float | None = None
    batch_size: int | None = None
    main_task: int = 0
    stationarity_tol: float = 1e-10
    # what to do on a Pareto-stationary (or unsolvable) batch: stop, take the
    # zero update, or step along the last valid bargaining weights
    on_stationary: str = "halt"
    seed: int = 0
    ihvp: IhvpConfig = field(default_factory=IhvpConfig)
    # Newton on the convex potential; CCP slows down badly near stationarity
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(method="newton"))

    def __post_init__(self):
        if not self.inner_lr > 0:
            raise ConfigError("inner_lr must be > 0")
        if self.pref_lr < 0:
            raise ConfigError("pref_lr must be >= 0 (0 keeps p fixed)")
        if self.pref_update_period < 1:
            raise ConfigError("pref_update_period must be >= 1")
        if self.total_outer_iters < 0:
            raise ConfigError("total_outer_iters must be >= 0")
        for name, allowed in (
            ("inner_optimizer", OPTIMIZERS),
            ("pref_update_rule", PREF_RULES),
            ("val_source", VAL_SOURCES),
            ("step_mode", STEP_MODES),
            ("on_stationary", STATIONARY_POLICIES),
            ("pref_optimizer", PREF_OPTIMIZERS),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.step_mode == "theorem1":
            if self.inner_optimizer != "plain_sgd":
                raise ConfigError("theorem1 step mode requires inner_optimizer='plain_sgd'")
            if self.smoothness is not None and not self.smoothness > 0:
                raise ConfigError("smoothness must be > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    step: int
    losses: np.ndarray
    p: np.ndarray
    alpha: np.ndarray
    residual: float
    mu: float
    sigma_min: float
    min_norm_combo: float
    val_loss: float
    theta: np.ndarray
    direction: np.ndarray


@dataclass
class Trajectory:
    num_tasks: int
    records: list[StepRecord] = field(default_factory=list)
    status: str = "completed"
    smoothness: float | None = None
    final_theta: np.ndarray | None = None
    final_p: np.ndarray | None = None
    pref_updates: int = 0
    skipped_steps: int = 0

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def header(self) -> list[str]:
        K = self.num_tasks
        return (
            ["step"]
            + [f"loss_{i}" for i in range(K)]
            + [f"p_{i}" for i in range(K)]
            + [f"alpha_{i}" for i in range(K)]
            + ["residual", "mu", "sigma_min", "min_norm_combo", "val_loss"]
        )

    def rows(self):
        for r in self.records:
            yield [r.step, *r.losses, *r.p, *r.alpha, r.residual, r.mu, r.sigma_min, r.min_norm_combo, r.val_loss]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for row in self.rows():
                writer.writerow([row[0], *(format_float(v) for v in row[1:])])
        return path

    def write_sidecar(self, path, config: dict, extra: dict | None = None) -> Path:
        meta = {
            "config": config,
            "seed": config.get("seed"),
            "git_revision": git_revision(),
            "status": self.status,
            "steps": len(self.records),
            "pref_updates": self.pref_updates,
            "smoothness": self.smoothness,
        }
        if extra:
            meta.update(extra)
        path = Path(path)
        path.write_text(json.dumps(meta, indent=2, default=_json_default) + "\n")
        return path


def format_float(v) -> str:
    return format(float(v), ".17g")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def git_revision() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def project_simplex(v: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Euclidean projection onto ``{x : sum x = 1, x_i >= floor}``."""
    v = np.asarray(v, dtype=float)
    K = v.size
    if floor * K > 1:
        raise ConfigError("floor too large for the simplex")
    mass = 1.0 - floor * K
    u = np.sort(v - floor)[::-1]
    css = np.cumsum(u) - mass
    ks = np.arange(1, K + 1)
    rho = ks[u - css / ks > 0][-1]
    tau = css[rho - 1] / rho
    return np.maximum(v - floor - tau, 0.0) + floor


def min_norm_element(G: np.ndarray, tol: float = 1e-10, max_iter: int | None = None) -> tuple[np.ndarray, float]:
    """Minimise ``||G w||`` over the probability simplex.

    Wolfe's min-norm-point method: an active set of columns whose affine hull
    minimiser is tracked exactly, so a zero minimum is found to rounding
    precision in a finite number of steps.
    """
    G = np.asarray(G, dtype=float)
    K = G.shape[1]
    M = G.T @ G
    if K == 1:
        return np.ones(1), float(np.linalg.norm(G[:, 0]))
    scale = max(float(np.diag(M).max()), np.finfo(float).tiny)
    gap_tol = max(tol * tol, 1e-15 * scale)
    w = np.zeros(K)
    j = int(np.argmin(np.diag(M)))
    w[j] = 1.0
    S = [j]
    max_iter = max_iter or 50 * K + 50
    for _ in range(max_iter):
        x = G @ w
        xx = float(x @ x)
        dots = G.T @ x
        i = int(np.argmin(dots))
        if xx - dots[i] <= gap_tol or i in S:
            break
        S.append(i)
        for _ in range(max_iter):
            v = _affine_minimizer(M, S)
            ws = w[S]
            if v.min() > 0:
                w[:] = 0.0
                w[S] = v
                break
            neg = v <= 0
            step = float(np.min(ws[neg] / (ws[neg] - v[neg])))
            ws = ws + step * (v - ws)
            w[:] = 0.0
            keep = ws > 0
            S = [s for s, k in zip(S, keep) if k]
            w[S] = ws[keep]
            w /= w.sum()
    return w, float(np.linalg.norm(G @ w))


def _affine_minimizer(M, S):
    """Minimum-norm point of the affine hull of the columns in ``S``, as affine weights."""
    k = len(S)
    kkt = np.ones((k + 1, k + 1))
    kkt[:k, :k] = M[np.ix_(S, S)]
    kkt[k, k] = 0.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    return np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]


def pareto_stationarity(grads: TaskGradientSet | np.ndarray) -> tuple[float, float]:
    """Return ``(smallest singular value of G, min over the simplex of ||G w||)``."""
    G = grads.gradients if isinstance(grads, TaskGradientSet) else np.asarray(grads, dtype=float)
    d, K = G.shape
    sv = np.linalg.svd(G, compute_uv=False)
    sigma_min = float(sv[-1]) if d >= K else 0.0
    _, combo = min_norm_element(G)
    return sigma_min, combo


def theorem1_step_size(prefs: PreferenceVector, weights: BargainingWeights, L: float) -> float:
    """``mu = (1 / (K L)) * sum_i p_i / alpha_i``."""
    alpha = np.asarray(weights.alpha if isinstance(weights, BargainingWeights) else weights, dtype=float)
    p = prefs.probs if isinstance(prefs, PreferenceVector) else np.asarray(prefs, dtype=float)
    if not L > 0:
        raise ConfigError("L must be > 0")
    if np.any(alpha <= 0):
        raise ConfigError("alpha must be strictly positive")
    return float(np.sum(p / alpha) / (alpha.size * L))


def estimate_smoothness(suite, theta: np.ndarray, probes: int = 20, seed: int = 0, batch=None) -> float:
    """1.1 x the largest Hessian Rayleigh quotient seen over ``probes`` power-iteration probes per task."""
    rng = np.random.default_rng(seed)
    best = 0.0
    for i in range(suite.num_tasks):
        e = np.zeros(suite.num_tasks)
        e[i] = 1.0
        v = rng.standard_normal(suite.param_dim)
        v /= np.linalg.norm(v)
        for _ in range(probes):
            hv = suite.hvp(e, theta, v, batch)
            best = max(best, abs(float(v @ hv)))
            n = np.linalg.norm(hv)
            if n == 0:
                break
            v = hv / n
    return 1.1 * best


# ---------------------------------------------------------------------------
# Delta-%
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeltaPercentReport:
    method_metrics: tuple[float, ...]
    baseline_metrics: tuple[float, ...]
    directions: tuple[int, ...]
    per_task: tuple[float, ...]
    delta: float

    @property
    def percent(self) -> float:
        return 100.0 * self.delta


def delta_percent(method_metrics: Sequence[float], baseline_metrics: Sequence[float], directions: Sequence[int]) -> DeltaPercentReport:
    """Mean sign-corrected relative change; ``directions[k] = 1`` when higher is better, 0 when lower is."""
    m = [float(x) for x in method_metrics]
    b = [float(x) for x in baseline_metrics]
    dirs = [int(x) for x in directions]
    if not (len(m) == len(b) == len(dirs)) or not m:
        raise ConfigError("method, baseline and directions must have equal non-zero length")
    if any(d not in (0, 1) for d in dirs):
        raise ConfigError("directions must be 0 (lower is better) or 1 (higher is better)")
    if any(x == 0 for x in b):
        raise ConfigError("baseline metrics must be non-zero")
    per_task = tuple((-1) ** d * (mk - bk) / bk for mk, bk, d in zip(m, b, dirs))
    return DeltaPercentReport(tuple(m), tuple(b), tuple(dirs), per_task, sum(per_task) / len(per_task))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class _BatchStream:
    """Shuffled passes over ``n`` indices in chunks of ``size``; full batch when size is None."""

    def __init__(self, n: int | None, size: int | None, rng: np.random.Generator):
        self.n, self.size, self.rng = n, size, rng
        self._order = None
        self._pos = 0

    def next(self):
        if self.n is None or self.size is None or self.size >= self.n:
            return None
        if self._order is None or self._pos >= self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.size]
        self._pos += self.size
        return idx

    def sample(self):
        if self.n is None or self.size is None or self.size >= self.n:
            return None
        return self.rng.choice(self.n, size=self.size, replace=False)


class _Momentum:
    def __init__(self, dim, lr, momentum):
        self.lr, self.momentum = lr, momentum
        self.buf = np.zeros(dim)

    def step(self, grad):
        self.buf = self.momentum * self.buf + grad
        return self.lr * self.buf


class _Adam:
    def __init__(self, dim, lr, betas, eps):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, direction):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * direction
        self.v = self.b2 * self.v + (1 - self.b2) * direction**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(
    suite,
    cfg: TrainConfig,
    init_theta: np.ndarray,
    init_p: PreferenceVector | None = None,
    val_suite=None,
) -> Trajectory:
    """Run ``total_outer_iters`` rounds of ``pref_update_period`` bargaining steps plus a preference update.

    ``val_suite`` supplies the validation loss in ``heldout_set`` mode; in
    ``separate_train_batch`` mode a fresh batch of the training data is used.
    The loop halts early at a Pareto-stationary point.
    """
    K = suite.num_tasks
    theta = np.array(init_theta, dtype=float).ravel()
    if theta.size != suite.param_dim:
        raise ConfigError(f"init_theta has length {theta.size}, suite expects {suite.param_dim}")
    prefs = init_p if init_p is not None else PreferenceVector.uniform(K)
    if prefs.num_tasks != K:
        raise ConfigError(f"init_p has {prefs.num_tasks} entries for {K} tasks")
    if not 0 <= cfg.main_task < K:
        raise ConfigError("main_task out of range")
    if cfg.val_source == "heldout_set" and val_suite is None:
        raise ConfigError("val_source='heldout_set' needs a val_suite")

    rng = np.random.default_rng(cfg.seed)
    stream = _BatchStream(suite.num_samples, cfg.batch_size, rng)
    val_stream = _BatchStream(suite.num_samples, cfg.batch_size, np.random.default_rng([cfg.seed, 1]))
    traj = Trajectory(num_tasks=K)

    L = None
    if cfg.step_mode == "theorem1":
        L = cfg.smoothness
        if L is None:
            L = suite.smoothness_bound if suite.smoothness_bound is not None else estimate_smoothness(suite, theta, seed=cfg.seed)
        traj.smoothness = float(L)
    adam = _Adam(theta.size, cfg.inner_lr, cfg.adam_betas, cfg.adam_eps) if cfg.inner_optimizer == "adam" else None

    update_prefs = cfg.pref_lr > 0 and K > 1
    if cfg.pref_optimizer == "adam":
        pref_opt = _Adam(K, cfg.pref_lr, cfg.adam_betas, cfg.adam_eps)
    else:
        pref_opt = _Momentum(K, cfg.pref_lr, cfg.pref_momentum)
    alpha_prev = None
    val_loss = math.nan
    step = 0
    halted = False

    for outer in range(cfg.total_outer_iters):
        last_batch = None
        for _ in range(cfg.pref_update_period):
            batch = stream.next()
            last_batch = batch
            losses = suite.losses(theta, batch)
            if not np.all(np.isfinite(losses)):
                traj.status = "diverged"
                log.warning("non-finite loss at step %d; aborting", step)
                return _finish(traj, theta, prefs)
            grads = suite.gradient_set(theta, batch)
            sigma_min, combo = pareto_stationarity(grads)
            weights = None
            if combo >= cfg.stationarity_tol:
                try:
                    weights = solve_alpha(grads, prefs, cfg.solver, warm_start=alpha_prev)
                except ParetoStationaryError:
                    if step == 0:
                        raise
                except SolverDivergedError:
                    if cfg.on_stationary == "halt":
                        raise
                    log.debug("step %d: bargaining solve failed on a near-stationary batch", step)
            fallback = weights is None
            if fallback and step == 0 and combo < cfg.stationarity_tol and cfg.on_stationary == "halt":
                raise ParetoStationaryError("initial parameters are already Pareto stationary")
            if fallback:
                if cfg.on_stationary == "halt":
                    halted = True
                    break
                traj.skipped_steps += 1
                if cfg.on_stationary == "reuse" and alpha_prev is not None:
                    weights = BargainingWeights(alpha=alpha_prev, residual_inf=math.nan, iterations_used=0, converged=False)
                else:
                    weights = BargainingWeights(alpha=np.zeros(K), residual_inf=math.nan, iterations_used=0, converged=False)
            elif not weights.converged:
                log.debug("step %d: bargaining solve stalled at residual %.3e", step, weights.residual_inf)
            if not fallback:
                alpha_prev = np.asarray(weights.alpha)
            direction = grads.gradients @ np.asarray(weights.alpha)

            if not np.any(weights.alpha):
                mu, delta = 0.0, np.zeros_like(theta)
            elif cfg.step_mode == "theorem1":
                mu = theorem1_step_size(prefs, weights, L)
                delta = mu * direction
            elif adam is not None:
                mu = cfg.inner_lr
                delta = adam.step(direction)
            else:
                mu = cfg.inner_lr
                delta = mu * direction

            if val_suite is not None:
                val_loss = val_suite.loss(cfg.main_task, theta)
            traj.records.append(
                StepRecord(
                    step=step,
                    losses=losses,
                    p=np.array(prefs.probs),
                    alpha=np.array(weights.alpha),
                    residual=weights.residual_inf,
                    mu=mu,
                    sigma_min=sigma_min,
                    min_norm_combo=combo,
                    val_loss=val_loss,
                    theta=theta.copy(),
                    direction=direction,
                )
            )
            theta = theta - delta
            step += 1
        if halted:
            traj.status = "pareto_stationary"
            break
        if not np.all(np.isfinite(theta)):
            traj.status = "diverged"
            return _finish(traj, theta, prefs)

        if update_prefs:
            prefs, val_loss_batch = _preference_step(suite, cfg, theta, prefs, last_batch, val_stream, val_suite, pref_opt)
            if val_suite is None:
                val_loss = val_loss_batch
            traj.pref_updates += 1
    return _finish(traj, theta, prefs)


def _finish(traj, theta, prefs):
    traj.final_theta = theta
    traj.final_p = np.array(prefs.probs)
    return traj


def _preference_step(suite, cfg, theta, prefs, batch, val_stream, val_suite, pref_opt):
    """One outer update of ``p``; advances the optimizer state ``pref_opt``."""
    if cfg.val_source == "heldout_set":
        val_grad = val_suite.grad(cfg.main_task, theta)
        val_loss = val_suite.loss(cfg.main_task, theta)
    else:
        vb = val_stream.sample()
        val_grad = suite.grad(cfg.main_task, theta, vb)
        val_loss = suite.loss(cfg.main_task, theta, vb)

    grads = suite.gradient_set(theta, batch)
    if pareto_stationarity(grads)[1] < max(cfg.stationarity_tol, 0.0):
        log.debug("skipping preference update: stationary batch")
        return prefs, val_loss
    try:
        weights = solve_alpha(grads, prefs, cfg.solver)
    except NumericalError as exc:
        log.debug("skipping preference update: %s", exc)
        return prefs, val_loss
    if not weights.converged:
        log.debug("skipping preference update: bargaining solve did not converge")
        return prefs, val_loss
    try:
        hg = hypergradient(suite, theta, prefs, weights, val_grad, cfg.ihvp, batch=batch, grads=grads)
    except NumericalError as exc:
        log.warning("skipping preference update: %s", exc)
        return prefs, val_loss

    if cfg.pref_update_rule == "softmax_logits":
        return PreferenceVector.from_logits(prefs.logits - pref_opt.step(hg.grad_logits)), val_loss
    p = project_simplex(prefs.probs - pref_opt.step(hg.grad_p), floor=cfg.pref_floor)
    return PreferenceVector.from_probs(p / p.sum()), val_loss


def with_overrides(cfg: TrainConfig, **overrides) -> TrainConfig:
    return replace(cfg, **overrides)
