"""Small differentiable multi-task problems with exact gradients.

Every suite exposes per-task ``loss``/``grad`` and a Hessian-vector product of
the weighted training loss ``sum_i alpha_i * loss_i``.  A ``batch`` argument is
either ``None`` (full batch), a ``slice`` or an integer index array into the
suite's data; data-free suites ignore it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from auxinash.bargaining import TaskGradientSet, build_gradient_set
from auxinash.errors import ConfigError

W_STAR = np.array([1.0, 1.0])
W_HARMFUL = np.array([-1.0, -4.0])
SIGMA_HELPFUL = 0.25
MAIN_NOISE_RATIO = 20.0


def fd_hvp(grad_fn, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Central-difference Hessian-vector product of ``grad_fn`` along ``v``."""
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return np.zeros_like(theta)
    h = np.cbrt(np.finfo(float).eps) * (1.0 + np.linalg.norm(theta))
    u = v / nv
    return (grad_fn(theta + h * u) - grad_fn(theta - h * u)) * (nv / (2.0 * h))


class TaskSuite:
    num_tasks: int
    param_dim: int
    smoothness_bound: float | None = None
    task_names: tuple[str, ...] = ()
    num_samples: int | None = None

    def loss(self, i: int, theta: np.ndarray, batch=None) -> float:
        raise NotImplementedError

    def grad(self, i: int, theta: np.ndarray, batch=None) -> np.ndarray:
        raise NotImplementedError

    def hvp(self, alpha, theta: np.ndarray, v: np.ndarray, batch=None) -> np.ndarray:
        """``(sum_i alpha_i * Hess loss_i) @ v``; finite differences unless overridden."""
        alpha = np.asarray(alpha, dtype=float)

        def weighted_grad(th):
            return sum(a * self.grad(i, th, batch) for i, a in enumerate(alpha) if a != 0.0)

        return fd_hvp(weighted_grad, np.asarray(theta, dtype=float), np.asarray(v, dtype=float))

    def losses(self, theta, batch=None) -> np.ndarray:
        return np.array([self.loss(i, theta, batch) for i in range(self.num_tasks)])

    def gradient_matrix(self, theta, batch=None) -> np.ndarray:
        return np.stack([self.grad(i, theta, batch) for i in range(self.num_tasks)], axis=1)

    def gradient_set(self, theta, batch=None) -> TaskGradientSet:
        return build_gradient_set([self.grad(i, theta, batch) for i in range(self.num_tasks)])

    def _check_task(self, i):
        if not 0 <= i < self.num_tasks:
            raise ConfigError(f"task index {i} out of range for {self.num_tasks} tasks")

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.param_dim,):
            raise ConfigError(f"theta must have shape ({self.param_dim},), got {theta.shape}")
        return theta


class TaskSubset(TaskSuite):
    """View of a suite restricted to some of its tasks (used for single-task baselines)."""

    def __init__(self, base: TaskSuite, tasks: Sequence[int]):
        self.base = base
        self.tasks = tuple(int(t) for t in tasks)
        for t in self.tasks:
            base._check_task(t)
        self.num_tasks = len(self.tasks)
        self.param_dim = base.param_dim
        self.smoothness_bound = base.smoothness_bound
        self.num_samples = base.num_samples
        if base.task_names:
            self.task_names = tuple(base.task_names[t] for t in self.tasks)

    def loss(self, i, theta, batch=None):
        return self.base.loss(self.tasks[i], theta, batch)

    def grad(self, i, theta, batch=None):
        return self.base.grad(self.tasks[i], theta, batch)

    def hvp(self, alpha, theta, v, batch=None):
        full = np.zeros(self.base.num_tasks)
        full[list(self.tasks)] = alpha
        return self.base.hvp(full, theta, v, batch)


# ---------------------------------------------------------------------------
# quadratics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticSuiteSpec:
    """``loss_i(theta) = 0.5 (theta - c_i)^T A_i (theta - c_i)``."""

    matrices: tuple[np.ndarray, ...]
    centers: tuple[np.ndarray, ...]

    @classmethod
    def random(cls, num_tasks: int, dim: int, seed: int = 0, eig_range=(0.5, 2.0), center_scale=1.0):
        rng = np.random.default_rng(seed)
        mats, centers = [], []
        for _ in range(num_tasks):
            Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            mats.append((Q * rng.uniform(*eig_range, size=dim)) @ Q.T)
            centers.append(center_scale * rng.standard_normal(dim))
        return cls(tuple(mats), tuple(centers))


class QuadraticSuite(TaskSuite):
    def __init__(self, spec: QuadraticSuiteSpec):
        if len(spec.matrices) == 0 or len(spec.matrices) != len(spec.centers):
            raise ConfigError("need one matrix and one center per task")
        mats = [np.asarray(A, dtype=float) for A in spec.matrices]
        centers = [np.asarray(c, dtype=float).ravel() for c in spec.centers]
        d = centers[0].size
        eig_max = 0.0
        for i, (A, c) in enumerate(zip(mats, centers)):
            if A.shape != (d, d) or c.size != d:
                raise ConfigError(f"task {i}: expected A of shape ({d},{d}) and center of length {d}")
            if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
                raise ConfigError(f"task {i}: matrix is not symmetric")
            eigs = np.linalg.eigvalsh(A)
            if eigs[0] <= 0:
                raise ConfigError(f"task {i}: matrix is not positive definite (min eigenvalue {eigs[0]:.3e})")
            eig_max = max(eig_max, eigs[-1])
        self.spec = spec
        self.A = np.stack(mats)
        self.c = np.stack(centers)
        self.num_tasks = len(mats)
        self.param_dim = d
        self.smoothness_bound = float(eig_max)

    def loss(self, i, theta, batch=None):
        self._check_task(i)
        r = self._check_theta(theta) - self.c[i]
        return float(0.5 * r @ self.A[i] @ r)

    def grad(self, i, theta, batch=None):
        self._check_task(i)
        return self.A[i] @ (self._check_theta(theta) - self.c[i])

    def hvp(self, alpha, theta, v, batch=None):
        alpha = np.asarray(alpha, dtype=float)
        return np.einsum("k,kij,j->i", alpha, self.A, np.asarray(v, dtype=float))

    def weighted_minimizer(self, weights) -> np.ndarray:
        """Minimiser of ``sum_i w_i loss_i``; traces the Pareto set as ``w`` ranges over the simplex."""
        w = np.asarray(weights, dtype=float)
        H = np.einsum("k,kij->ij", w, self.A)
        return np.linalg.solve(H, np.einsum("k,kij,kj->i", w, self.A, self.c))


def make_quadratic(spec: QuadraticSuiteSpec) -> QuadraticSuite:
    return QuadraticSuite(spec)


def steering_quadratic() -> QuadraticSuite:
    """Two anisotropic quadratics in R^2 with distinct centres; the desk-scale steering testbed."""
    A1 = np.array([[2.0, 0.3], [0.3, 0.5]])
    A2 = np.array([[0.6, -0.2], [-0.2, 1.5]])
    return QuadraticSuite(QuadraticSuiteSpec((A1, A2), (np.array([1.0, 0.0]), np.array([0.0, 1.0]))))


# ---------------------------------------------------------------------------
# the illustrative regression problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IllustrativeDataset:
    inputs: np.ndarray
    main_targets: np.ndarray
    helpful_targets: np.ndarray
    harmful_targets: np.ndarray
    seed: int | None = None

    COLUMNS = ("x1", "x2", "y_main", "y_helpful", "y_harmful")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def targets(self) -> np.ndarray:
        """``n x 3`` matrix ordered (main, helpful, harmful)."""
        return np.stack([self.main_targets, self.helpful_targets, self.harmful_targets], axis=1)

    def subset(self, index) -> "IllustrativeDataset":
        return IllustrativeDataset(
            self.inputs[index],
            self.main_targets[index],
            self.helpful_targets[index],
            self.harmful_targets[index],
            self.seed,
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for x, row in zip(self.inputs, self.targets):
                writer.writerow([repr(float(v)) for v in (*x, *row)])

    @classmethod
    def from_csv(cls, path) -> "IllustrativeDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != cls.COLUMNS:
                raise ConfigError(f"unexpected CSV header {header}, expected {cls.COLUMNS}")
            data = np.array([[float(v) for v in row] for row in reader]).reshape(-1, 5)
        return cls(data[:, :2].copy(), data[:, 2].copy(), data[:, 3].copy(), data[:, 4].copy())


def generate_illustrative(n: int, seed: int, sigma_h: float = SIGMA_HELPFUL) -> IllustrativeDataset:
    """Draw ``n`` points with x ~ U[-2, 2]^2; main noise is 20x the helpful noise."""
    if n < 2:
        raise ConfigError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2.0, 2.0, size=(n, 2))
    noise = rng.standard_normal((n, 3))
    sigma_main = MAIN_NOISE_RATIO * sigma_h
    return IllustrativeDataset(
        inputs=X,
        main_targets=X @ W_STAR + sigma_main * noise[:, 0],
        helpful_targets=X @ W_STAR + sigma_h * noise[:, 1],
        harmful_targets=X @ W_HARMFUL + sigma_h * noise[:, 2],
        seed=seed,
    )


class LinearRegressionSuite(TaskSuite):
    """Shared linear model ``y ~ x^T W`` with one mean-squared-error loss per target column."""

    def __init__(self, inputs: np.ndarray, targets: np.ndarray, task_names: Sequence[str] = ()):
        X = np.asarray(inputs, dtype=float)
        Y = np.asarray(targets, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or Y.shape[0] != X.shape[0] or X.shape[0] == 0:
            raise ConfigError("inputs must be n x d and targets n x K with n >= 1")
        self.X, self.Y = X, Y
        self.num_tasks = Y.shape[1]
        self.param_dim = X.shape[1]
        self.num_samples = X.shape[0]
        self.task_names = tuple(task_names)
        # every task shares the Hessian 2 X^T X / n
        self.smoothness_bound = float(2.0 * np.linalg.eigvalsh(X.T @ X / X.shape[0])[-1])

    @classmethod
    def from_dataset(cls, ds: IllustrativeDataset) -> "LinearRegressionSuite":
        return cls(ds.inputs, ds.targets, ("main", "helpful", "harmful"))

    def _rows(self, batch):
        if batch is None:
            return self.X, self.Y
        return self.X[batch], self.Y[batch]

    def loss(self, i, theta, batch=None):
        self._check_task(i)
        X, Y = self._rows(batch)
        r = X @ self._check_theta(theta) - Y[:, i]
        return float(np.mean(r**2))

    def grad(self, i, theta, batch=None):
        self._check_task(i)
        X, Y = self._rows(batch)
        r = X @ self._check_theta(theta) - Y[:, i]
        return 2.0 * X.T @ r / X.shape[0]

    def hvp(self, alpha, theta, v, batch=None):
        X, _ = self._rows(batch)
        return float(np.sum(alpha)) * 2.0 * X.T @ (X @ np.asarray(v, dtype=float)) / X.shape[0]


def make_illustrative(n: int = 1000, seed: int = 0, n_heldout: int | None = None, sigma_h: float = SIGMA_HELPFUL):
    """Build the three-task regression suite (main, helpful, harmful).

    Returns ``(suite, train, heldout)``; the held-out set is an independent
    draw of ``n_heldout`` points (default ``n``) from the same distribution.
    """
    if n < 2:
        raise ConfigError("need at least 2 training samples")
    train = generate_illustrative(n, seed, sigma_h)
    n_heldout = n if n_heldout is None else n_heldout
    heldout = generate_illustrative(n_heldout, seed + 1_000_003, sigma_h)
    return LinearRegressionSuite.from_dataset(train), train, heldout


def population_gradients(W, sigma_h: float = SIGMA_HELPFUL) -> np.ndarray:
    """Closed-form expected gradients ``2 E[x x^T] (W - W_task)`` for x ~ U[-2,2]^2; columns (main, helpful, harmful)."""
    second_moment = (4.0 / 3.0) * np.eye(2)
    W = np.asarray(W, dtype=float)
    return np.stack([2 * second_moment @ (W - t) for t in (W_STAR, W_STAR, W_HARMFUL)], axis=1)


def population_main_loss(W, sigma_h: float = SIGMA_HELPFUL) -> float:
    """Expected main-task squared error: noise variance plus ``(W - W*)^T E[xx^T] (W - W*)``."""
    r = np.asarray(W, dtype=float) - W_STAR
    return float((MAIN_NOISE_RATIO * sigma_h) ** 2 + (4.0 / 3.0) * r @ r)


# ---------------------------------------------------------------------------
# toy MLP
# ---------------------------------------------------------------------------


class ToyMLPSuite(TaskSuite):
    """One tanh hidden layer shared by ``K`` scalar regression heads.

    Parameters are packed as ``[W (h x m), b (h), V (K x h), c (K)]``.  The
    gradients are hand-written backprop; HVPs use finite differences.
    """

    def __init__(self, inputs: np.ndarray, targets: np.ndarray, hidden: int):
        self.X = np.asarray(inputs, dtype=float)
        self.Y = np.asarray(targets, dtype=float)
        n, m = self.X.shape
        self.hidden = hidden
        self.in_dim = m
        self.num_tasks = self.Y.shape[1]
        self.num_samples = n
        self.param_dim = hidden * m + hidden + self.num_tasks * hidden + self.num_tasks

    def unpack(self, theta):
        theta = self._check_theta(theta)
        h, m, K = self.hidden, self.in_dim, self.num_tasks
        o = 0
        W = theta[o : o + h * m].reshape(h, m)
        o += h * m
        b = theta[o : o + h]
        o += h
        V = theta[o : o + K * h].reshape(K, h)
        o += K * h
        c = theta[o : o + K]
        return W, b, V, c

    def _rows(self, batch):
        if batch is None:
            return self.X, self.Y
        return self.X[batch], self.Y[batch]

    def loss(self, i, theta, batch=None):
        self._check_task(i)
        W, b, V, c = self.unpack(theta)
        X, Y = self._rows(batch)
        Z = np.tanh(X @ W.T + b)
        r = Z @ V[i] + c[i] - Y[:, i]
        return float(np.mean(r**2))

    def grad(self, i, theta, batch=None):
        self._check_task(i)
        W, b, V, c = self.unpack(theta)
        X, Y = self._rows(batch)
        n = X.shape[0]
        Z = np.tanh(X @ W.T + b)
        r = Z @ V[i] + c[i] - Y[:, i]
        dr = 2.0 * r / n
        gV = np.zeros_like(V)
        gc = np.zeros_like(c)
        gV[i] = Z.T @ dr
        gc[i] = dr.sum()
        dpre = np.outer(dr, V[i]) * (1.0 - Z**2)
        gW = dpre.T @ X
        gb = dpre.sum(axis=0)
        return np.concatenate([gW.ravel(), gb, gV.ravel(), gc])


def make_toy_mlp(hidden: int = 8, tasks: int = 2, seed: int = 0, n: int = 128, in_dim: int = 3, noise: float = 0.1):
    """Toy MLP suite with synthetic targets from independent random teacher heads.

    Returns ``(suite, theta0)`` where ``theta0`` is a small random initialisation.
    """
    if hidden < 1:
        raise ConfigError("hidden must be >= 1")
    if tasks < 2:
        raise ConfigError("the toy MLP suite needs at least 2 tasks")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, in_dim))
    W_t = rng.standard_normal((hidden, in_dim))
    Z = np.tanh(X @ W_t.T)
    heads = rng.standard_normal((tasks, hidden))
    Y = Z @ heads.T + noise * rng.standard_normal((n, tasks))
    suite = ToyMLPSuite(X, Y, hidden)
    theta0 = 0.3 * rng.standard_normal(suite.param_dim)
    return suite, theta0


def finite_difference_grad(fn, theta: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        out[j] = (fn(theta + e) - fn(theta - e)) / (2 * h)
    return out


def check_gradients(suite: TaskSuite, theta: np.ndarray, batch=None, h: float = 1e-6) -> float:
    """Worst relative error between ``suite.grad`` and finite differences of ``suite.loss``."""
    worst = 0.0
    for i in range(suite.num_tasks):
        g = suite.grad(i, theta, batch)
        fd = finite_difference_grad(lambda th: suite.loss(i, th, batch), theta, h)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst


def save_dataset(ds: IllustrativeDataset, path) -> Path:
    path = Path(path)
    ds.to_csv(path)
    return path
