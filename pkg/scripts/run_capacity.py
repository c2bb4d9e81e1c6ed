"""Capacity ablation: one fit per (sum-weight count, seed) and the spread of mean JSD."""
import argparse

from _common import CACHE, RESULTS

from ispn import evaluator as ev
from ispn.experiments import profile
from ispn.specfile import BUILTIN


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("datasets", nargs="*", default=list(BUILTIN))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    args = ap.parse_args()
    for name in args.datasets:
        entries = ev.capacity_sweep(name, profile(name).capacity_sizes, args.seeds, cache_dir=CACHE)
        ev.write_sweep(RESULTS / f"capacity_{name}.csv", name, entries)
        means = [e.mean_jsd for e in entries]
        print(name, " ".join(f"{e.size}:{e.mean_jsd:.4f}" for e in entries), f"spread {max(means) - min(means):.4f}")


if __name__ == "__main__":
    main()
