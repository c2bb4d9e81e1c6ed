"""Chi-square autonomy and truncated-factorisation checks on sampled rosters."""
import argparse
import csv

import numpy as np
from _common import RESULTS

from ispn.scm_checks import holm, property_suite
from ispn.specfile import BUILTIN, load_builtin


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("datasets", nargs="*", default=list(BUILTIN))
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--alpha", type=float, default=0.01)
    args = ap.parse_args()
    RESULTS.mkdir(parents=True, exist_ok=True)
    with (RESULTS / "property_suite.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "kind", "regime", "variable", "other", "statistic", "dof", "p_value", "rejected"])
        for name in args.datasets:
            res = property_suite(load_builtin(name), args.n)
            rej = holm([r.p_value for r in res], args.alpha)
            for r, bad in zip(res, rej):
                w.writerow([name, r.kind, r.regime, r.variable, r.other, f"{r.statistic:.4f}", r.dof, f"{r.p_value:.6f}", int(bad)])
            print(f"{name}: {len(res)} tests, {int(np.sum(rej))} rejected after Holm, min p {min(r.p_value for r in res):.4f}")


if __name__ == "__main__":
    main()
