"""Sweep preference-update settings on the illustrative problem.

Prints the seed-averaged final preferences and distance to W* for each
setting, next to the main-only baseline.  Used to probe how far the
harmful-task preference can be driven down within the training budget.
"""

import argparse
import itertools

import numpy as np

from auxinash import harness
from auxinash.diffmodels import W_STAR


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0], formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--pref-lr", type=float, nargs="+", default=[5e-3, 5e-2, 5e-1])
    parser.add_argument("--period", type=int, nargs="+", default=[5, 25])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--output", default="runs/sweep", help="artifact root")
    parser.add_argument("--jobs", type=int, default=3)
    args = parser.parse_args(argv)

    print("pref_lr   period  p_main  p_help  p_harm  |W-W*|  |W_main-W*|")
    for lr, period in itertools.product(args.pref_lr, args.period):
        spec = harness.RecipeSpec("illustrative", tuple(args.seeds), train={"pref_lr": lr, "pref_update_period": period})
        out = f"{args.output}/lr{lr:g}_n{period}"
        harness.run_recipe(spec, out, args.jobs)
        p, dist, base = [], [], []
        for seed in args.seeds:
            prefs = harness._read_csv(f"{out}/illustrative/seed{seed}_preferences.csv")
            p.append([float(prefs[-1][f"p_{k}"]) for k in harness.TASK_NAMES])
            paths = harness._read_csv(f"{out}/illustrative/seed{seed}_paths.csv")
            for method, acc in (("auxinash", dist), ("main_only", base)):
                last = [r for r in paths if r["method"] == method][-1]
                acc.append(np.hypot(float(last["w1"]) - W_STAR[0], float(last["w2"]) - W_STAR[1]))
        pm = np.mean(p, axis=0)
        print(f"{lr:<9g} {period:<7d} {pm[0]:.3f}   {pm[1]:.3f}   {pm[2]:.3f}   {np.mean(dist):.3f}   {np.mean(base):.3f}")


if __name__ == "__main__":
    main()
