"""Experiment recipes, artifact writers and the checkers that re-read them.

Every recipe writes CSV artifacts plus a ``manifest.json``.  The pass/fail
flags stored in the manifest are produced by ``check_*`` functions that only
look at the files on disk, never at the in-memory training state.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from auxinash.bargaining import PreferenceVector, SolverConfig, build_gradient_set, solve_alpha
from auxinash.diffmodels import (
    W_STAR,
    LinearRegressionSuite,
    QuadraticSuiteSpec,
    TaskSubset,
    make_illustrative,
    make_quadratic,
    make_toy_mlp,
    population_main_loss,
    steering_quadratic,
)
from auxinash.errors import ConfigError
from auxinash.hypergrad import IhvpConfig
from auxinash.trainer import TrainConfig, format_float, git_revision, pareto_stationarity, train

log = logging.getLogger(__name__)

RECIPES = ("illustrative", "steer", "directions", "convergence", "aux_set_ablation")
TASK_NAMES = ("main", "helpful", "harmful")
LANDSCAPE_RANGE = ((-2.0, 2.0), (-2.0, 5.0))
LANDSCAPE_POINTS = 201
# independent CCP route, tight enough that its own error is far below the angle tolerance
REFERENCE_SOLVER = SolverConfig(method="ccp", fixed_point_tolerance=1e-11, inner_tolerance=1e-12)
STEER_GRID = (0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99)
DIRECTION_GRADIENTS = ((1.0, 0.2, 0.0), (0.1, 1.0, 0.3), (-0.2, 0.3, 1.0))
DIRECTION_GRID = (
    (1 / 3, 1 / 3, 1 / 3),
    (0.6, 0.2, 0.2),
    (0.2, 0.6, 0.2),
    (0.2, 0.2, 0.6),
    (0.8, 0.15, 0.05),
    (0.05, 0.15, 0.8),
)


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


def _parse_nested(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"unknown key {where}.{key}")
    return cls(**values)


def train_config_from_dict(values: dict | None, base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from plain values; dotted keys (``ihvp.mode``) address nested configs.

    Unknown keys raise ConfigError naming the key.
    """
    base = base or TrainConfig()
    values = dict(values or {})
    top = {f.name for f in dataclasses.fields(TrainConfig)}
    nested: dict[str, dict] = {"ihvp": {}, "solver": {}}
    flat: dict[str, Any] = {}
    for key, val in values.items():
        head, _, rest = key.partition(".")
        if head not in top:
            raise ConfigError(f"unknown key {key}")
        if head in nested:
            if rest:
                nested[head][rest] = val
            elif isinstance(val, dict):
                nested[head].update(val)
            else:
                raise ConfigError(f"{key} must be an object")
        elif rest:
            raise ConfigError(f"unknown key {key}")
        else:
            flat[head] = val
    if "adam_betas" in flat:
        flat["adam_betas"] = tuple(flat["adam_betas"])
    ihvp = _parse_nested(IhvpConfig, {**dataclasses.asdict(base.ihvp), **nested["ihvp"]}, "ihvp")
    solver = _parse_nested(SolverConfig, {**dataclasses.asdict(base.solver), **nested["solver"]}, "solver")
    try:
        return dataclasses.replace(base, ihvp=ihvp, solver=solver, **flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RecipeSpec:
    """What to run: recipe name, seeds, suite parameters, TrainConfig overrides, sweep grid."""

    name: str
    seeds: tuple[int, ...] = (0,)
    suite: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    grid: tuple = ()
    output_dir: str = "runs"

    def __post_init__(self):
        if self.name not in RECIPES:
            raise ConfigError(f"unknown recipe {self.name!r}; expected one of {RECIPES}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.grid = tuple(tuple(g) if isinstance(g, (list, tuple)) else g for g in self.grid)
        # validate overrides early so a bad key fails before any training
        train_config_from_dict(self.train)

    @classmethod
    def from_dict(cls, values: dict) -> "RecipeSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        for key in values:
            if key not in names:
                raise ConfigError(f"unknown key {key}")
        if "name" not in values:
            raise ConfigError("recipe spec needs a name")
        vals = dict(values)
        if "grid" in vals:
            if not vals["grid"]:
                raise ConfigError("sweep grid must be non-empty")
            vals["grid"] = tuple(vals["grid"])
        if "seeds" in vals:
            vals["seeds"] = tuple(vals["seeds"])
        return cls(**vals)

    @classmethod
    def load(cls, path) -> "RecipeSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seeds": list(self.seeds),
            "suite": dict(self.suite),
            "train": dict(self.train),
            "grid": [list(g) if isinstance(g, tuple) else g for g in self.grid],
            "output_dir": self.output_dir,
        }


@dataclass
class RunManifest:
    recipe: str
    config: dict
    seeds: list[int]
    artifacts: list[str]
    checks: dict[str, bool]
    details: dict = field(default_factory=dict)
    reported: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "recipe": self.recipe,
            "config": self.config,
            "seeds": self.seeds,
            "artifacts": self.artifacts,
            "checks": self.checks,
            "passed": self.passed,
            "details": self.details,
            "reported": self.reported,
            "git_revision": git_revision(),
        }

    def write(self, path) -> Path:
        path = Path(path)
        missing = [a for a in self.artifacts if not Path(a).exists()]
        if missing:
            raise ConfigError(f"manifest lists missing artifacts: {missing}")
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_jsonable) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        return cls(d["recipe"], d["config"], d["seeds"], d["artifacts"], d["checks"], d.get("details", {}), d.get("reported", {}))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, (str, int)) and not isinstance(v, bool) else format_float(v) for v in row])
    return path


def _read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _map(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _suite_params(spec: RecipeSpec, defaults: dict) -> dict:
    for key in spec.suite:
        if key not in defaults:
            raise ConfigError(f"unknown key suite.{key}")
    return {**defaults, **spec.suite}


def _outdir(spec: RecipeSpec, output_dir) -> Path:
    out = Path(output_dir if output_dir is not None else spec.output_dir) / spec.name
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# illustrative regression
# ---------------------------------------------------------------------------


ILLUSTRATIVE_SUITE = {"n": 1000, "epochs": 1000, "sigma_h": 0.25, "init": [0.0, 0.0]}
ILLUSTRATIVE_TRAIN = {
    "inner_optimizer": "adam",
    "inner_lr": 1e-2,
    "batch_size": 256,
    "pref_lr": 5e-3,
    "pref_update_period": 25,
    "on_stationary": "skip",
}


def _illustrative_config(spec: RecipeSpec, seed: int, n: int) -> TrainConfig:
    suite = _suite_params(spec, ILLUSTRATIVE_SUITE)
    values = {**ILLUSTRATIVE_TRAIN, **spec.train, "seed": seed}
    if "total_outer_iters" not in values:
        batch = values.get("batch_size") or n
        steps = int(suite["epochs"]) * math.ceil(n / batch)
        values["total_outer_iters"] = max(1, steps // int(values["pref_update_period"]))
    return train_config_from_dict(values)


def _illustrative_seed(args):
    spec, seed = args
    params = _suite_params(spec, ILLUSTRATIVE_SUITE)
    suite, _, heldout = make_illustrative(int(params["n"]), seed, sigma_h=float(params["sigma_h"]))
    cfg = _illustrative_config(spec, seed, suite.num_samples)
    init = np.asarray(params["init"], dtype=float)
    val_suite = LinearRegressionSuite.from_dataset(heldout) if cfg.val_source == "heldout_set" else None
    aux = train(suite, cfg, init, val_suite=val_suite)
    base = train(TaskSubset(suite, [0]), dataclasses.replace(cfg, pref_lr=0.0), init)
    return seed, aux, base


def run_illustrative(spec: RecipeSpec, output_dir=None, jobs: int = 1) -> RunManifest:
    """AuxiNash vs a main-task-only baseline on the three-task regression problem."""
    out = _outdir(spec, output_dir)
    artifacts = [str(_write_landscape(out / "landscape.csv"))]
    summary = []
    for seed, aux, base in _map(_illustrative_seed, [(spec, s) for s in spec.seeds], jobs):
        prefs = [(r.step, *r.p) for r in aux.records] + [(len(aux.records), *aux.final_p)]
        artifacts.append(str(_write_csv(out / f"seed{seed}_preferences.csv", ["step", *(f"p_{t}" for t in TASK_NAMES)], prefs)))
        paths = [(r.step, "auxinash", *r.theta) for r in aux.records]
        paths.append((len(aux.records), "auxinash", *aux.final_theta))
        paths += [(r.step, "main_only", *r.theta) for r in base.records]
        paths.append((len(base.records), "main_only", *base.final_theta))
        artifacts.append(str(_write_csv(out / f"seed{seed}_paths.csv", ["step", "method", "w1", "w2"], paths)))
        summary.append((seed, *aux.final_p, *aux.final_theta, *base.final_theta, aux.skipped_steps, aux.pref_updates, aux.status))
    artifacts.append(
        str(
            _write_csv(
                out / "summary.csv",
                ["seed", "p_main", "p_helpful", "p_harmful", "w1", "w2", "main_only_w1", "main_only_w2", "skipped_steps", "pref_updates", "status"],
                summary,
            )
        )
    )
    checks, details = check_illustrative(out, spec.seeds)
    return _finish(spec, out, artifacts, checks, details)


def _write_landscape(path: Path) -> Path:
    (x0, x1), (y0, y1) = LANDSCAPE_RANGE
    xs = np.linspace(x0, x1, LANDSCAPE_POINTS)
    ys = np.linspace(y0, y1, LANDSCAPE_POINTS)
    rows = ((x, y, population_main_loss((x, y))) for y in ys for x in xs)
    return _write_csv(path, ["w1", "w2", "main_loss"], rows)


def check_illustrative(out, seeds: Sequence[int], harmful_max: float = 0.05) -> tuple[dict, dict]:
    out = Path(out)
    checks, details = {}, {}
    for seed in seeds:
        prefs = _read_csv(out / f"seed{seed}_preferences.csv")
        final = np.array([float(prefs[-1][f"p_{t}"]) for t in TASK_NAMES])
        finals = {}
        for row in _read_csv(out / f"seed{seed}_paths.csv"):
            finals[row["method"]] = np.array([float(row["w1"]), float(row["w2"])])
        dist = float(np.linalg.norm(finals["auxinash"] - W_STAR))
        base = float(np.linalg.norm(finals["main_only"] - W_STAR))
        checks[f"seed{seed}_harmful_below_{harmful_max}"] = bool(final[2] < harmful_max)
        checks[f"seed{seed}_main_pref_is_max"] = bool(np.argmax(final) == 0)
        checks[f"seed{seed}_closer_than_main_only"] = bool(dist < base)
        details[f"seed{seed}"] = {"final_p": final.tolist(), "distance": dist, "main_only_distance": base}
    return checks, details


# ---------------------------------------------------------------------------
# preference steering on two quadratics
# ---------------------------------------------------------------------------


STEER_SUITE = {"init": [2.0, 2.0], "steps": 5000}
STEER_TRAIN = {"step_mode": "theorem1", "pref_lr": 0.0, "inner_optimizer": "plain_sgd"}


def _steer_point(args):
    spec, p1 = args
    params = _suite_params(spec, STEER_SUITE)
    suite = steering_quadratic()
    values = {**STEER_TRAIN, **spec.train, "seed": spec.seeds[0]}
    values.setdefault("total_outer_iters", max(1, int(params["steps"]) // int(values.get("pref_update_period", 25))))
    cfg = train_config_from_dict(values)
    traj = train(suite, cfg, np.asarray(params["init"], dtype=float), PreferenceVector.from_probs([p1, 1.0 - p1]))
    return p1, traj


def run_steer(spec: RecipeSpec, output_dir=None, jobs: int = 1) -> RunManifest:
    """One fixed-preference run per grid point; endpoints in objective space."""
    out = _outdir(spec, output_dir)
    grid = tuple(float(g) for g in (spec.grid or STEER_GRID))
    if any(not 0 < g < 1 for g in grid):
        raise ConfigError("steer grid values must lie in (0, 1)")
    if 0.5 not in grid:
        grid = tuple(sorted(grid + (0.5,)))
    suite = steering_quadratic()
    rows, uniform = [], None
    for p1, traj in _map(_steer_point, [(spec, g) for g in grid], jobs):
        th = traj.final_theta
        rows.append((p1, 1.0 - p1, *th, suite.loss(0, th), suite.loss(1, th), traj.status, len(traj)))
        if p1 == 0.5:
            uniform = traj
    artifacts = [
        str(_write_csv(out / "endpoints.csv", ["p_1", "p_2", "theta_1", "theta_2", "loss_1", "loss_2", "status", "steps"], rows))
    ]
    # directions of the uniform run next to a symmetric (all-ones) Nash-MTL solve at the same points
    ref = []
    for r in uniform.records:
        G = suite.gradient_matrix(r.theta)
        nash = solve_alpha(build_gradient_set(G.T), np.ones(2), REFERENCE_SOLVER)
        ref.append((r.step, *r.direction, *(G @ nash.alpha), int(nash.regularized)))
    header = ["step", "dir_1", "dir_2", "nash_1", "nash_2", "reference_regularized"]
    artifacts.append(str(_write_csv(out / "nash_reference.csv", header, ref)))
    checks, details = check_steer(out)
    return _finish(spec, out, artifacts, checks, details)


def pareto_front_distance(suite, theta, resolution: int = 20001) -> float:
    """Distance from ``theta`` to the minimisers of ``w l_1 + (1 - w) l_2``, w on a fine grid."""
    ws = np.linspace(0.0, 1.0, resolution)
    A1, A2 = suite.A
    c1, c2 = suite.c
    H = ws[:, None, None] * A1 + (1 - ws)[:, None, None] * A2
    rhs = ws[:, None] * (A1 @ c1) + (1 - ws)[:, None] * (A2 @ c2)
    front = np.linalg.solve(H, rhs[..., None])[..., 0]
    return float(np.min(np.linalg.norm(front - np.asarray(theta), axis=1)))


def check_steer(out, separation: float = 1e-4, front_tol: float = 1e-2, angle_tol: float = 1e-6) -> tuple[dict, dict]:
    out = Path(out)
    rows = sorted(_read_csv(out / "endpoints.csv"), key=lambda r: float(r["p_1"]))
    p1 = np.array([float(r["p_1"]) for r in rows])
    losses = np.array([[float(r["loss_1"]), float(r["loss_2"])] for r in rows])
    thetas = np.array([[float(r["theta_1"]), float(r["theta_2"])] for r in rows])
    gaps = [np.linalg.norm(losses[i] - losses[j]) for i in range(len(rows)) for j in range(i + 1, len(rows))]
    suite = steering_quadratic()
    front = [pareto_front_distance(suite, th) for th in thetas]
    checks = {
        "endpoints_distinct": bool(min(gaps) > separation) if gaps else True,
        "loss_1_nonincreasing_in_p1": bool(np.all(np.diff(losses[:, 0]) <= 0)),
        "loss_2_nondecreasing_in_p1": bool(np.all(np.diff(losses[:, 1]) >= 0)),
        "endpoints_on_pareto_front": bool(max(front) <= front_tol),
    }
    lo, mid, hi = (np.argmin(np.abs(p1 - v)) for v in (0.1, 0.5, 0.9))
    if {p1[lo], p1[hi]} == {0.1, 0.9} and p1[mid] == 0.5:
        between = all(min(losses[lo, k], losses[hi, k]) <= losses[mid, k] <= max(losses[lo, k], losses[hi, k]) for k in (0, 1))
        checks["uniform_between_extremes"] = bool(between)
    angles = []
    for r in _read_csv(out / "nash_reference.csv"):
        # a regularised reference solves a shifted problem; nothing to compare there
        if int(r["reference_regularized"]):
            continue
        a = np.array([float(r["dir_1"]), float(r["dir_2"])])
        b = np.array([float(r["nash_1"]), float(r["nash_2"])])
        angles.append(_angle(a, b))
    checks["uniform_parallel_to_nash_mtl"] = bool(max(angles) <= angle_tol) if angles else False
    details = {"min_separation": float(min(gaps)) if gaps else None, "max_front_distance": float(max(front)), "max_nash_angle": max(angles, default=None)}
    return checks, details


def _angle(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return math.pi
    # atan2 form stays accurate for tiny angles
    return float(math.atan2(np.linalg.norm(a / na - b / nb), np.linalg.norm(a / na + b / nb)) * 2)


# ---------------------------------------------------------------------------
# direction geometry for three gradients in R^3
# ---------------------------------------------------------------------------


def run_directions(spec: RecipeSpec, output_dir=None, jobs: int = 1) -> RunManifest:
    out = _outdir(spec, output_dir)
    params = _suite_params(spec, {"gradients": DIRECTION_GRADIENTS})
    gradients = np.asarray(params["gradients"], dtype=float)
    grads = build_gradient_set(gradients)
    K = grads.num_tasks
    grid = [np.asarray(p, dtype=float) for p in (spec.grid or DIRECTION_GRID)]
    rows = []
    for p in grid:
        if p.size != K:
            raise ConfigError(f"grid point {p.tolist()} has {p.size} entries for {K} gradients")
        prefs = PreferenceVector.from_probs(p / p.sum())
        w = solve_alpha(grads, prefs, train_config_from_dict(spec.train).solver)
        d = grads.gradients @ w.alpha
        rows.append((*prefs.probs, *w.alpha, *d, *(grads.gradients.T @ d), w.residual_inf, int(w.converged)))
    dim = grads.dim
    header = (
        [f"p_{i}" for i in range(K)]
        + [f"alpha_{i}" for i in range(K)]
        + [f"dir_{j}" for j in range(dim)]
        + [f"proj_{i}" for i in range(K)]
        + ["residual", "converged"]
    )
    artifacts = [
        str(_write_csv(out / "gradients.csv", [f"x_{j}" for j in range(dim)], gradients)),
        str(_write_csv(out / "directions.csv", header, rows)),
    ]
    checks, details = check_directions(out)
    return _finish(spec, out, artifacts, checks, details)


def check_directions(out, tol: float = 1e-6, angle_tol: float = 1e-6) -> tuple[dict, dict]:
    out = Path(out)
    G = np.array([[float(v) for v in r.values()] for r in _read_csv(out / "gradients.csv")])
    K, dim = G.shape
    worst, positive, angle = 0.0, True, None
    for r in _read_csv(out / "directions.csv"):
        p = np.array([float(r[f"p_{i}"]) for i in range(K)])
        a = np.array([float(r[f"alpha_{i}"]) for i in range(K)])
        d = np.array([float(r[f"dir_{j}"]) for j in range(dim)])
        proj = G @ d
        worst = max(worst, float(np.max(np.abs(proj - p / a))))
        positive &= bool(np.all(proj > 0))
        if np.allclose(p, 1.0 / K, rtol=0, atol=1e-12):
            nash = solve_alpha(build_gradient_set(G), np.ones(K), REFERENCE_SOLVER)
            angle = _angle(d, G.T @ nash.alpha)
    checks = {"projections_equal_p_over_alpha": worst <= tol, "projections_positive": positive}
    if angle is not None:
        checks["uniform_matches_nash_mtl"] = angle <= angle_tol
    return checks, {"max_projection_error": worst, "uniform_nash_angle": angle}


# ---------------------------------------------------------------------------
# convergence runs under the adaptive step size
# ---------------------------------------------------------------------------


CONVERGENCE_SUITE = {"kind": "quadratic", "steps": 5000, "init": None, "hidden": 8}
CONVERGENCE_TRAIN = {"step_mode": "theorem1", "inner_optimizer": "plain_sgd"}


def _convergence_problem(params: dict, seed: int):
    kind = params["kind"]
    if kind == "quadratic":
        suite = steering_quadratic()
        init = np.array([2.0, 2.0])
    elif kind == "random_quadratic":
        suite = make_quadratic(QuadraticSuiteSpec.random(2, 4, seed=seed))
        init = 3.0 * np.ones(4)
    elif kind == "single_quadratic":
        suite = make_quadratic(QuadraticSuiteSpec((np.diag([1.0, 2.0]),), (np.zeros(2),)))
        init = np.array([1.0, -1.0])
    elif kind == "mlp":
        suite, init = make_toy_mlp(hidden=int(params["hidden"]), tasks=2, seed=seed)
    else:
        raise ConfigError(f"unknown convergence suite kind {kind!r}")
    if params.get("init") is not None:
        init = np.asarray(params["init"], dtype=float)
    return suite, init


def run_convergence(spec: RecipeSpec, output_dir=None, jobs: int = 1) -> RunManifest:
    out = _outdir(spec, output_dir)
    params = _suite_params(spec, CONVERGENCE_SUITE)
    artifacts = []
    details = {}
    for seed in spec.seeds:
        suite, init = _convergence_problem(params, seed)
        values = {**CONVERGENCE_TRAIN, **spec.train, "seed": seed}
        values.setdefault("total_outer_iters", max(1, int(params["steps"]) // int(values.get("pref_update_period", 25))))
        cfg = train_config_from_dict(values)
        traj = train(suite, cfg, init)
        curves = [(r.step, float(np.mean(r.losses)), r.min_norm_combo, r.mu) for r in traj.records]
        final_losses = suite.losses(traj.final_theta)
        _, final_combo = pareto_stationarity(suite.gradient_set(traj.final_theta))
        curves.append((len(traj.records), float(np.mean(final_losses)), final_combo, 0.0))
        artifacts.append(str(_write_csv(out / f"seed{seed}_curves.csv", ["step", "mean_loss", "min_norm_combo", "mu"], curves)))
        artifacts.append(str(traj.to_csv(out / f"seed{seed}_trajectory.csv")))
        artifacts.append(str(traj.write_sidecar(out / f"seed{seed}_trajectory.json", cfg.to_dict(), {"suite": params["kind"]})))
        details[f"seed{seed}"] = {"status": traj.status, "steps": len(traj), "smoothness": traj.smoothness}
    required = 1.0 if params["kind"] != "mlp" else 0.99
    checks, more = check_convergence(out, spec.seeds, monotone_fraction=required)
    details.update(more)
    return _finish(spec, out, artifacts, checks, details)


def check_convergence(out, seeds: Sequence[int], monotone_fraction: float = 1.0, combo_tol: float = 1e-3) -> tuple[dict, dict]:
    out = Path(out)
    checks, details = {}, {}
    for seed in seeds:
        rows = _read_csv(out / f"seed{seed}_curves.csv")
        loss = np.array([float(r["mean_loss"]) for r in rows])
        # allow the rounding error of evaluating the loss itself
        slack = 4 * np.finfo(float).eps * np.maximum(np.abs(loss[:-1]), np.finfo(float).tiny)
        ok = np.diff(loss) <= slack
        frac = float(ok.mean()) if ok.size else 1.0
        final_combo = float(rows[-1]["min_norm_combo"])
        checks[f"seed{seed}_mean_loss_nonincreasing"] = frac >= monotone_fraction
        checks[f"seed{seed}_min_norm_combo_below_{combo_tol}"] = final_combo < combo_tol
        details[f"seed{seed}_monotone_fraction"] = frac
        details[f"seed{seed}_final_min_norm_combo"] = final_combo
    return checks, details


# ---------------------------------------------------------------------------
# where the validation loss comes from
# ---------------------------------------------------------------------------


ABLATION_SUITE = {"n": 1000, "epochs": 1000, "sigma_h": 0.25, "init": [0.0, 0.0], "aux_fraction": 0.1}
ABLATION_SEEDS = (0, 1, 2, 3, 4)


def _ablation_seed(args):
    spec, seed = args
    params = _suite_params(spec, ABLATION_SUITE)
    n = int(params["n"])
    full, train_ds, heldout = make_illustrative(n, seed, sigma_h=float(params["sigma_h"]))
    n_aux = max(1, int(round(float(params["aux_fraction"]) * n)))
    partial = LinearRegressionSuite.from_dataset(train_ds.subset(slice(0, n - n_aux)))
    aux_set = LinearRegressionSuite.from_dataset(train_ds.subset(slice(n - n_aux, n)))
    test = LinearRegressionSuite.from_dataset(heldout)
    init = np.asarray(params["init"], dtype=float)
    sub = RecipeSpec("illustrative", (seed,), {k: v for k, v in params.items() if k != "aux_fraction"}, spec.train)
    rows = []
    for variant, suite, val_source, val_suite in (
        ("auxinash_train_batch", full, "separate_train_batch", None),
        ("auxinash_aux_set", partial, "heldout_set", aux_set),
    ):
        cfg = dataclasses.replace(_illustrative_config(sub, seed, suite.num_samples), val_source=val_source)
        traj = train(suite, cfg, init, val_suite=val_suite)
        rows.append((seed, variant, suite.num_samples, test.loss(0, traj.final_theta), population_main_loss(traj.final_theta)))
    for variant, suite in (("stl_full", full), ("stl_partial", partial)):
        cfg = dataclasses.replace(_illustrative_config(sub, seed, suite.num_samples), pref_lr=0.0)
        traj = train(TaskSubset(suite, [0]), cfg, init)
        rows.append((seed, variant, suite.num_samples, test.loss(0, traj.final_theta), population_main_loss(traj.final_theta)))
    return rows


def run_aux_set_ablation(spec: RecipeSpec, output_dir=None, jobs: int = 1) -> RunManifest:
    """Validation loss from a separate training batch (all data) vs. a held-out auxiliary set."""
    out = _outdir(spec, output_dir)
    rows = [r for chunk in _map(_ablation_seed, [(spec, s) for s in spec.seeds], jobs) for r in chunk]
    path = _write_csv(out / "results.csv", ["seed", "variant", "train_size", "heldout_main_loss", "population_main_loss"], rows)
    checks, details, reported = check_aux_set_ablation(out)
    return _finish(spec, out, [str(path)], checks, details, reported)


def check_aux_set_ablation(out) -> tuple[dict, dict, dict]:
    rows = _read_csv(Path(out) / "results.csv")
    by_variant: dict[str, list[float]] = {}
    for r in rows:
        by_variant.setdefault(r["variant"], []).append(float(r["population_main_loss"]))
    means = {k: float(np.mean(v)) for k, v in by_variant.items()}
    expected = {"auxinash_train_batch", "auxinash_aux_set", "stl_full", "stl_partial"}
    checks = {"all_variants_present": expected <= set(means)}
    # seed-averaged: a single draw is too noisy to order the two STL runs
    if checks["all_variants_present"]:
        checks["stl_partial_worse_than_stl_full"] = means["stl_partial"] > means["stl_full"]
    reported = {}
    if {"auxinash_train_batch", "auxinash_aux_set"} <= set(means):
        reported["train_batch_at_least_as_good_as_aux_set"] = means["auxinash_train_batch"] <= means["auxinash_aux_set"]
    return checks, {"mean_population_main_loss": means}, reported


# ---------------------------------------------------------------------------


RUNNERS = {
    "illustrative": run_illustrative,
    "steer": run_steer,
    "directions": run_directions,
    "convergence": run_convergence,
    "aux_set_ablation": run_aux_set_ablation,
}
CHECKERS = {
    "illustrative": lambda out, m: check_illustrative(out, m.seeds)[0],
    "steer": lambda out, m: check_steer(out)[0],
    "directions": lambda out, m: check_directions(out)[0],
    "convergence": lambda out, m: check_convergence(
        out, m.seeds, monotone_fraction=0.99 if m.config.get("suite", {}).get("kind") == "mlp" else 1.0
    )[0],
    "aux_set_ablation": lambda out, m: check_aux_set_ablation(out)[0],
}


def default_spec(name: str, **overrides) -> RecipeSpec:
    if name == "aux_set_ablation":
        overrides.setdefault("seeds", ABLATION_SEEDS)
    return RecipeSpec(name=name, **overrides)


def run_recipe(spec: RecipeSpec, output_dir=None, jobs: int = 1) -> RunManifest:
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return RUNNERS[spec.name](spec, output_dir, jobs)


def recheck(manifest_path) -> dict[str, bool]:
    """Recompute the verdicts of a finished run from its artifacts alone."""
    manifest = RunManifest.load(manifest_path)
    return CHECKERS[manifest.recipe](Path(manifest_path).parent, manifest)


def _finish(spec, out, artifacts, checks, details, reported=None) -> RunManifest:
    manifest = RunManifest(
        recipe=spec.name,
        config=spec.to_dict(),
        seeds=list(spec.seeds),
        artifacts=artifacts,
        checks={k: bool(v) for k, v in checks.items()},
        details=details,
        reported=reported or {},
    )
    manifest.write(out / "manifest.json")
    return manifest
