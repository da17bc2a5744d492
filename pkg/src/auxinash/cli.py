"""Command-line entry point: ``auxinash {solve,grad-check,train,recipe}``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
3 numerical failure.  Errors print a single ``error: <Kind>: <reason>`` line
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from auxinash import harness
from auxinash.bargaining import PreferenceVector, SolverConfig, build_gradient_set, solve_alpha
from auxinash.diffmodels import LinearRegressionSuite, QuadraticSuiteSpec, make_illustrative, make_quadratic, make_toy_mlp, steering_quadratic
from auxinash.errors import ConfigError, NumericalError
from auxinash.gradcheck import run_battery
from auxinash.trainer import format_float, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "AUXINASH_SEED"
TRAIN_SUITES = ("illustrative", "steer", "quadratic", "mlp")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        out[key.strip()] = _parse_value(value)
    return out


def resolve_seed(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        text = sys.stdin.read() if path == "-" else Path(path).read_text()
        data = json.loads(text)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read JSON from {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _emit(text: str, output) -> None:
    if output in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(output).write_text(text)


def _json_floats(obj):
    # 17 significant digits round-trip every double
    if isinstance(obj, float):
        return _Raw(format_float(obj))
    if isinstance(obj, (list, tuple)):
        return [_json_floats(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _json_floats(v) for k, v in obj.items()}
    return obj


class _Raw(str):
    pass


def dumps(obj) -> str:
    """JSON text with floats printed at 17 significant digits."""

    def enc(o):
        if isinstance(o, _Raw):
            return o if o not in ("nan", "inf", "-inf") else json.dumps(str(o))
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, int):
            return str(o)
        if isinstance(o, list):
            return "[" + ", ".join(enc(v) for v in o) + "]"
        if isinstance(o, dict):
            return "{" + ", ".join(f"{json.dumps(k)}: {enc(v)}" for k, v in o.items()) + "}"
        raise TypeError(type(o))

    return enc(_json_floats(obj)) + "\n"


# ---------------------------------------------------------------------------


def cmd_solve(args) -> int:
    data = _load_json(args.input or "-")
    for key in data:
        if key not in ("gradients", "preference"):
            raise ConfigError(f"unknown key {key}")
    if "gradients" not in data:
        raise ConfigError("input needs 'gradients'")
    grads = build_gradient_set(np.asarray(data["gradients"], dtype=float))
    if "preference" in data:
        prefs = PreferenceVector.from_probs(data["preference"])
    else:
        prefs = PreferenceVector.uniform(grads.num_tasks)
    solver = {**_load_json(args.config), **parse_overrides(args.set)}
    known = {f.name for f in dataclasses.fields(SolverConfig)}
    for key in solver:
        if key not in known:
            raise ConfigError(f"unknown key {key}")
    cfg = SolverConfig(**solver)
    w = solve_alpha(grads, prefs, cfg)
    out = {
        "alpha": [float(a) for a in w.alpha],
        "residual": float(w.residual_inf),
        "direction": [float(x) for x in grads.gradients @ w.alpha],
        "converged": bool(w.converged),
    }
    _emit(dumps(out), args.output)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_battery(resolve_seed(args.seed))
    _emit(json.dumps([r.to_dict() for r in results], indent=2) + "\n", args.output)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def _train_problem(kind: str, seed: int, n: int):
    if kind == "illustrative":
        suite, _, heldout = make_illustrative(n, seed)
        return suite, np.zeros(2), LinearRegressionSuite.from_dataset(heldout)
    if kind == "steer":
        return steering_quadratic(), np.array([2.0, 2.0]), None
    if kind == "quadratic":
        return make_quadratic(QuadraticSuiteSpec.random(3, 4, seed=seed)), 3.0 * np.ones(4), None
    suite, theta0 = make_toy_mlp(seed=seed)
    return suite, theta0, None


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    values = {**_load_json(args.config), **parse_overrides(args.set), "seed": seed}
    cfg = harness.train_config_from_dict(values)
    suite, theta0, val_suite = _train_problem(args.suite, seed, args.n)
    if cfg.val_source == "heldout_set" and val_suite is None:
        raise ConfigError(f"suite {args.suite!r} has no held-out set")
    traj = train(suite, cfg, theta0, val_suite=val_suite)
    if args.output in (None, "-"):
        writer = csv.writer(sys.stdout)
        writer.writerow(traj.header())
        for row in traj.rows():
            writer.writerow([row[0], *(format_float(v) for v in row[1:])])
    else:
        out = Path(args.output)
        traj.to_csv(out)
        traj.write_sidecar(out.with_suffix(".json"), cfg.to_dict(), {"suite": args.suite})
    logging.getLogger("auxinash").info("status=%s steps=%d", traj.status, len(traj))
    return EXIT_OK


def _recipe_spec(args) -> harness.RecipeSpec:
    data = {"name": args.name, **_load_json(args.config)}
    if data["name"] != args.name:
        raise ConfigError(f"config is for recipe {data['name']!r}, not {args.name!r}")
    for key, value in parse_overrides(args.set).items():
        head, _, rest = key.partition(".")
        if head in ("train", "suite") and rest:
            data.setdefault(head, {})
            data[head] = {**data[head], rest: value}
        elif head in ("seeds", "grid", "output_dir") and not rest:
            data[head] = value
        else:
            raise ConfigError(f"unknown key {key}")
    if args.seed is not None or (os.environ.get(SEED_ENV) and "seeds" not in data):
        data["seeds"] = [resolve_seed(args.seed)]
    if "seeds" not in data and args.name == "aux_set_ablation":
        data["seeds"] = list(harness.ABLATION_SEEDS)
    return harness.RecipeSpec.from_dict(data)


def cmd_recipe(args) -> int:
    if args.input is not None:
        checks = harness.recheck(args.input)
        print(json.dumps({"checks": checks, "passed": all(checks.values())}, indent=2))
        return EXIT_OK if all(checks.values()) else EXIT_CHECK
    spec = _recipe_spec(args)
    manifest = harness.run_recipe(spec, args.output, args.jobs)
    print(json.dumps({"recipe": manifest.recipe, "checks": manifest.checks, "passed": manifest.passed}, indent=2))
    return EXIT_OK if manifest.passed else EXIT_CHECK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="auxinash", description="Preference-weighted bargaining for auxiliary learning.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr (repeat for debug) (default: quiet)")
    sub = parser.add_subparsers(dest="command", metavar="{solve,grad-check,train,recipe}", parser_class=_Parser)

    def common(p, *, config_help, set_help):
        fmt = argparse.ArgumentDefaultsHelpFormatter
        p.formatter_class = fmt
        p.add_argument("--config", default=None, help=config_help)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help=set_help)
        p.add_argument("--seed", type=int, default=None, help=f"random seed; falls back to ${SEED_ENV}, then 0")

    p = sub.add_parser("solve", help="solve for the bargaining weights of one gradient set")
    p.add_argument("--input", default=None, help='JSON {"gradients": [[...]], "preference": [...]}; "-" or omitted reads stdin')
    p.add_argument("--output", default=None, help='output JSON path; "-" or omitted writes stdout')
    common(p, config_help="JSON file of SolverConfig fields", set_help="override a SolverConfig field (repeatable)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("grad-check", help="run the finite-difference validation battery")
    p.add_argument("--output", default=None, help='report path; "-" or omitted writes stdout')
    p.add_argument("--seed", type=int, default=None, help=f"random seed; falls back to ${SEED_ENV}, then 0")
    p.formatter_class = argparse.ArgumentDefaultsHelpFormatter
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("train", help="train on a built-in suite and write the trajectory")
    p.add_argument("--suite", choices=TRAIN_SUITES, default="illustrative", help="problem to train on")
    p.add_argument("--n", type=int, default=1000, help="sample count for the illustrative suite")
    p.add_argument("--output", default=None, help='trajectory CSV path (a JSON sidecar is written next to it); "-" or omitted writes CSV to stdout')
    common(
        p,
        config_help="JSON file of TrainConfig fields",
        set_help="override a TrainConfig field, dotted for nested ones, e.g. ihvp.mode=exact_solve (repeatable)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recipe", help="run an experiment recipe and check its artifacts")
    p.add_argument("name", choices=harness.RECIPES, help="recipe to run")
    p.add_argument("--input", default=None, help="existing manifest.json to re-check instead of running")
    p.add_argument("--output", default=None, help="artifact root, a subdirectory per recipe (None: the spec's output_dir, itself defaulting to runs)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common(
        p,
        config_help="JSON recipe spec (name, seeds, suite, train, grid, output_dir)",
        set_help="override train.<field>, suite.<field>, seeds or grid (repeatable)",
    )
    p.set_defaults(func=cmd_recipe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: usage: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_NUMERIC


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
