"""Wall-clock benchmarks: full training passes, batched marginal queries, and
query latency against circuit size."""
import argparse
import json
from dataclasses import asdict

from _common import CACHE, RESULTS

from ispn import evaluator as ev
from ispn.circuit import build_rat
from ispn.experiments import fit, make_roster, profile, rat_config
from ispn.scm import uniform_roster
from ispn.specfile import BUILTIN, load_builtin


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", default="health")
    ap.add_argument("--passes", type=int, default=50)
    ap.add_argument("--rows", type=int, default=10_000, help="rows per regime in the timed roster")
    args = ap.parse_args()
    name = args.dataset
    scm, prof = load_builtin(name), profile(name)
    model = fit(name, 0, cache_dir=CACHE, scm=scm).model
    roster = make_roster(scm, uniform_roster(scm), args.rows, 0)
    timings = ev.runtime_bench(model, roster, args.passes, batch_size=prof.batch_size)
    ev.write_timings(RESULTS / f"runtime_{name}.csv", timings)
    for t in timings:
        print(f"{name} {t.label}: {t.mean:.4f}s +- {t.std:.4f}s (cv {t.cv:.3f})")
    scaling = {}
    for d in BUILTIN:
        p = profile(d)
        structs = [build_rat(rat_config(p, load_builtin(d).n, w)) for w in p.capacity_sizes]
        fits = ev.latency_scaling(structs)
        scaling[d] = {k: asdict(v) for k, v in fits.items()}
        print(f"{d} latency R^2: nodes {fits['nodes'].r2:.3f}, edges {fits['edges'].r2:.3f}")
    (RESULTS / "latency_scaling.json").write_text(json.dumps(scaling, indent=1) + "\n")


if __name__ == "__main__":
    main()
