"""Average treatment effects learned from atomic regimes, against the oracle."""
import argparse

from _common import CACHE, RESULTS, SEEDS

from ispn import evaluator as ev
from ispn.experiments import fit
from ispn.scm import Intervention, exact_ate
from ispn.specfile import load_builtin


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", default="earthquake")
    ap.add_argument("--treatment", default="Burglary")
    ap.add_argument("--outcome", default="Alarm")
    args = ap.parse_args()
    scm = load_builtin(args.dataset)
    t = args.treatment
    regimes = [Intervention(), Intervention.of({t: 0.0}), Intervention.of({t: 1.0})]
    fits = [fit(args.dataset, s, regimes=regimes, cache_dir=CACHE, scm=scm) for s in SEEDS]
    rep = ev.AteReport(
        args.dataset, t, args.outcome, exact_ate(scm, t, args.outcome),
        ev.naive_difference(scm, t, args.outcome), [ev.model_ate(f.model, t, args.outcome) for f in fits],
    )
    rep.write_csv(RESULTS / f"ate_{args.dataset}.csv")
    print(f"oracle {rep.oracle:.5f} naive {rep.naive:.5f} model {rep.mean:.5f} +- {rep.std:.5f}")


if __name__ == "__main__":
    main()
