"""Run one experiment recipe and print its checks.

    python scripts/run_recipe.py steer --output runs
    python scripts/run_recipe.py illustrative --seeds 0 1 2 --jobs 3
"""

import argparse
import json
import sys

from auxinash import harness


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0], formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("name", choices=harness.RECIPES)
    parser.add_argument("--spec", default=None, help="JSON recipe spec; overrides the built-in defaults")
    parser.add_argument("--seeds", type=int, nargs="+", default=None, help="seeds to run")
    parser.add_argument("--output", default="runs", help="artifact root")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers")
    args = parser.parse_args(argv)

    spec = harness.RecipeSpec.load(args.spec) if args.spec else harness.default_spec(args.name)
    if spec.name != args.name:
        parser.error(f"spec is for {spec.name!r}")
    if args.seeds:
        spec = harness.RecipeSpec(spec.name, tuple(args.seeds), spec.suite, spec.train, spec.grid, spec.output_dir)
    manifest = harness.run_recipe(spec, args.output, args.jobs)
    for key, ok in manifest.checks.items():
        print(f"{'pass' if ok else 'FAIL'}  {key}")
    for key, value in manifest.reported.items():
        print(f"info  {key} = {value}")
    print(json.dumps(manifest.details, indent=2, default=str))
    return 0 if manifest.passed else 1


if __name__ == "__main__":
    sys.exit(main())
