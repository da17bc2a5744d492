"""Run every recipe with its default spec and summarise the verdicts."""

import argparse
import sys
import time

from auxinash import harness


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--output", default="runs", help="artifact root")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers per recipe")
    parser.add_argument("--only", nargs="+", choices=harness.RECIPES, default=None, help="subset of recipes")
    args = parser.parse_args(argv)

    failed = []
    for name in args.only or harness.RECIPES:
        start = time.perf_counter()
        manifest = harness.run_recipe(harness.default_spec(name), args.output, args.jobs)
        bad = [k for k, v in manifest.checks.items() if not v]
        print(f"{name:18s} {'pass' if not bad else 'FAIL'}  {time.perf_counter() - start:6.1f}s  {', '.join(bad)}")
        if bad:
            failed.append(name)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
