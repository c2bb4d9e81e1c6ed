"""Command-line entry point: ``ispn generate | train | eval | rerun``.

Every command writes a ``manifest.json`` into its output directory. The run
id is a hash of the command and its settings, so reruns reproduce it.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import re
import sys
from dataclasses import asdict
from importlib import metadata
from pathlib import Path


from . import evaluator as ev
from .circuit import build_rat, rat_config_for
from .errors import (
    BadRegimeSpec,
    HashMismatch,
    IspnError,
    NonFiniteLoss,
    ParseError,
    SchemaMismatch,
    UnknownDataset,
    UnknownRegime,
    UnknownVariable,
)
from .experiments import PROFILES, make_roster, rat_config
from .gate import read_checkpoint_header
from .model import Ispn, load_structure, save_structure
from .scm import exact_ate, parse_regime, uniform_roster
from .specfile import BUILTIN, load_builtin, load_cbn, read_dataset, write_dataset
from .trainer import TrainConfig, check_roster, init_gate, train

OUT_ENV = "ISPN_OUT"
DEFAULT_OUT = "ispn_runs"
MODES = ("marginals", "jsd", "ate", "capacity", "runtime")


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+local"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_id_for(command: str, argv: list[str]) -> str:
    return hashlib.sha256(json.dumps([command, argv]).encode()).hexdigest()[:12]


def split_regimes(text: str) -> list[str]:
    """Split a comma-joined regime list; commas inside values are kept."""
    parts = [p.strip() for p in re.split(r",(?=\s*(?:obs\b|do:))", text)]
    return [p for p in parts if p]


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.=_-]+", "_", label)


def _load_scm(name_or_path: str):
    if name_or_path in BUILTIN:
        return load_builtin(name_or_path)
    p = Path(name_or_path)
    if p.suffix == ".scm" and p.exists():
        return load_cbn(p)
    raise UnknownDataset(name_or_path)


class Manifest:
    def __init__(self, command: str, argv: list[str], out: Path):
        self.out = out
        self.doc = {
            "command": command,
            "argv": argv,
            "run_id": run_id_for(command, argv),
            "tool_version": _version(),
            "start": _now(),
            "outputs": [],
        }

    @property
    def run_id(self) -> str:
        return self.doc["run_id"]

    def add(self, path: Path) -> Path:
        self.doc["outputs"].append(str(Path(path).relative_to(self.out)))
        return path

    def write(self, **extra) -> Path:
        self.doc.update(extra)
        self.doc["end"] = _now()
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.doc, indent=1, sort_keys=True) + "\n")
        return path


def _read_manifest(directory: Path) -> dict:
    p = directory / "manifest.json"
    return json.loads(p.read_text()) if p.exists() else {}


# ---------------------------------------------------------------------- commands


def cmd_generate(args, argv) -> int:
    scm = _load_scm(args.dataset)
    specs = [s for chunk in args.regimes for s in split_regimes(chunk)] if args.regimes else None
    regimes = [parse_regime(s, scm) for s in specs] if specs else uniform_roster(scm)
    prof = PROFILES.get(args.dataset)
    n = args.n if args.n is not None else (prof.n if prof else 10_000)
    if n <= 0:
        raise BadRegimeSpec(f"sample size must be positive, got {n}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("generate", argv, out)
    data = make_roster(scm, regimes, n, args.seed)
    for k, ds in enumerate(data):
        extra = {"run_id": man.run_id, "order": k, "dataset": args.dataset}
        c, j = write_dataset(ds, out / f"{k:02d}_{_slug(ds.intervention.label)}.csv", extra)
        man.add(c)
        man.add(j)
    man.write(dataset=args.dataset, n=n, seed=args.seed, regimes=[iv.label for iv in regimes])
    print(f"wrote {len(data)} regimes to {out}")
    return 0


def _read_roster(directory: Path):
    sidecars = [p for p in directory.glob("*.json") if p.name != "manifest.json"]
    if not sidecars:
        raise UsageError(f"no datasets found in {directory}")
    metas = []
    for p in sidecars:
        meta = json.loads(p.read_text())
        metas.append((meta.get("order", 0), p.name, p.with_suffix(".csv")))
    metas.sort()
    return [read_dataset(c) for _, _, c in metas]


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_train(args, argv) -> int:
    roster_dir = Path(args.roster)
    roster = _read_roster(roster_dir)
    check_roster(roster)  # fail fast before any training
    rmeta = _read_manifest(roster_dir)
    dataset = args.dataset or rmeta.get("dataset")
    prof = PROFILES.get(dataset)
    epochs = args.epochs if args.epochs is not None else (prof.epochs if prof else 20)
    batch = args.batch_size if args.batch_size is not None else (prof.batch_size if prof else 100)
    sw = args.sum_weights or (prof.sum_weights if prof else 2400)
    lp = args.leaf_params or (prof.leaf_params if prof else None)
    seeds = _int_list(args.seeds)
    if not seeds:
        raise UsageError("need at least one seed")
    hidden = _int_list(args.hidden)
    cfg = TrainConfig(epochs=epochs, batch_size=batch, learning_rate=args.lr, seeds=seeds, hidden=hidden, roster=tuple(roster))
    rat = rat_config_for(roster[0].graph.n, sw, lp, seed=args.structure_seed)
    structure = build_rat(rat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("train", argv, out)
    man.add(save_structure(out / "structure.json", structure))
    ckpts = []
    for seed in seeds:
        net = init_gate(structure, hidden, seed)
        _, log, model = train(cfg, structure, net, roster, seed=seed)
        ck = out / f"seed{seed}.ckpt"
        model.save(ck, {"run_id": man.run_id, "seed": seed, "dataset": dataset})
        man.add(ck)
        man.add(log.write_csv(out / f"seed{seed}_log.csv", man.run_id))
        ckpts.append(str(ck.relative_to(out)))
        print(f"seed {seed}: final mean log-likelihood {log.curve()[-1]:.4f}" if log.epochs else f"seed {seed}: no epochs")
    man.write(
        dataset=dataset,
        roster=str(roster_dir),
        train_config=cfg.to_dict(),
        rat_config=asdict(rat),
        seeds=list(seeds),
        structure_hash=structure.hash,
        checkpoints=ckpts,
        data_reseeded=False,
    )
    return 0


def _load_models(args):
    ckpts = []
    for c in args.checkpoints:
        p = Path(c)
        if p.is_dir():
            ckpts.extend(sorted(p.glob("seed*.ckpt")))
        elif p.exists():
            ckpts.append(p)
        else:
            raise UsageError(f"checkpoint not found: {p}")
    if not ckpts:
        raise UsageError("no checkpoints given")
    struct_path = Path(args.structure) if args.structure else ckpts[0].parent / "structure.json"
    structure = load_structure(struct_path)
    return [Ispn.load(c, structure) for c in ckpts], structure, ckpts


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def cmd_eval(args, argv) -> int:
    out = Path(args.out)
    if args.mode == "capacity":
        out.mkdir(parents=True, exist_ok=True)
        return _eval_capacity(args, Manifest("eval", argv, out))
    if not args.checkpoints:
        raise UsageError("eval needs at least one checkpoint")
    models, structure, ckpts = _load_models(args)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("eval", argv, out)
    dataset = args.dataset
    if dataset is None:
        dataset = read_checkpoint_header(ckpts[0]).get("dataset")
    if dataset is None:
        raise UsageError("cannot tell which dataset the checkpoints belong to; pass --dataset")
    scm = _load_scm(dataset)
    roster = _read_roster(Path(args.roster)) if args.roster else None
    regimes = [ds.intervention for ds in roster] if roster else uniform_roster(scm)
    common = dict(dataset=dataset, mode=args.mode, checkpoints=[str(c) for c in ckpts], structure_hash=structure.hash)

    if args.mode in ("marginals", "jsd"):
        truth = ev.GroundTruth(scm, mc_samples=args.mc_samples)
        rep = ev.marginal_report(dataset, scm, models, regimes, truth, include_intervened=args.mode == "marginals")
        if args.mode == "marginals":
            man.add(rep.write_json(out / "marginals.json", man.run_id))
        else:
            man.add(rep.write_csv(out / "jsd.csv", man.run_id))
            for v, (m, s, k) in rep.per_variable().items():
                print(f"{v:>12s}  {m:.4f} +- {s:.4f}")
    elif args.mode == "ate":
        if not (args.treatment and args.outcome):
            raise UsageError("--mode ate needs --treatment and --outcome")
        oracle = exact_ate(scm, args.treatment, args.outcome)
        naive = ev.naive_difference(scm, args.treatment, args.outcome)
        rep = ev.AteReport(dataset, args.treatment, args.outcome, oracle, naive, [ev.model_ate(m, args.treatment, args.outcome) for m in models])
        man.add(rep.write_csv(out / "ate.csv", man.run_id))
        print(f"oracle {oracle:.5f}  model {rep.mean:.5f} +- {rep.std:.5f}")
    elif args.mode == "runtime":
        roster = roster or make_roster(scm, regimes, 1000, 0)
        timings = ev.runtime_bench(models[0], roster, args.passes, batch_size=args.batch_size)
        man.add(ev.write_timings(out / "runtime.csv", timings, man.run_id))
        prof = PROFILES.get(dataset)
        sizes = prof.capacity_sizes if prof else (600, 1200, 1800, 2400, 3200)
        structs = [build_rat(rat_config(prof, scm.n, w) if prof else rat_config_for(scm.n, w)) for w in sizes]
        fits = ev.latency_scaling(structs)
        man.add(_write_json(out / "latency_scaling.json", {"run_id": man.run_id, "sizes": list(sizes), **{k: asdict(v) for k, v in fits.items()}}))
        for t in timings:
            print(f"{t.label}: {t.mean:.4f}s +- {t.std:.4f}s (cv {t.cv:.3f})")
        print(f"latency vs nodes R^2 = {fits['nodes'].r2:.3f}, vs edges R^2 = {fits['edges'].r2:.3f}")
    man.write(**common)
    return 0


def _eval_capacity(args, man: Manifest) -> int:
    dataset = args.dataset
    if dataset not in PROFILES:
        raise UsageError("--mode capacity needs --dataset naming a built-in dataset")
    prof = PROFILES[dataset]
    sizes = _int_list(args.sizes) if args.sizes else prof.capacity_sizes
    seeds = _int_list(args.seeds)
    kw = {}
    if args.n is not None:
        kw["n"] = args.n
    if args.epochs is not None:
        kw["cfg"] = TrainConfig(epochs=args.epochs, batch_size=prof.batch_size)
    entries = ev.capacity_sweep(dataset, sizes, seeds, cache_dir=args.cache, **kw)
    man.add(ev.write_sweep(man.out / "capacity.csv", dataset, entries, man.run_id))
    for e in entries:
        print(f"size {e.size}: mean JSD {e.mean_jsd:.4f}")
    man.write(dataset=dataset, mode="capacity", sizes=list(sizes), seeds=list(seeds), n=args.n, epochs=args.epochs)
    return 0


def cmd_rerun(args, argv) -> int:
    doc = json.loads(Path(args.manifest).read_text())
    return main([doc["command"], *doc["argv"], "--out", args.out])


# ------------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    default_out = os.environ.get(OUT_ENV, DEFAULT_OUT)
    p = argparse.ArgumentParser(prog="ispn", description="Interventional sum-product networks.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample one dataset per regime")
    g.add_argument("dataset", help=f"one of {', '.join(BUILTIN)} or a .scm file")
    g.add_argument("--regimes", action="append", help="comma-separated regime specs (default: obs plus uniform on each variable)")
    g.add_argument("--n", type=int, default=None, help="rows per regime")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None)

    t = sub.add_parser("train", help="train one model per seed on a generated roster")
    t.add_argument("roster", help="directory written by 'generate'")
    t.add_argument("--dataset", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seeds", default="0,1,2,3,4")
    t.add_argument("--hidden", default="10,10")
    t.add_argument("--sum-weights", type=int, default=None)
    t.add_argument("--leaf-params", type=int, default=None)
    t.add_argument("--structure-seed", type=int, default=0)
    t.add_argument("--out", default=None)

    e = sub.add_parser("eval", help="evaluate trained checkpoints")
    e.add_argument("--checkpoints", nargs="*", default=[], help="checkpoint files or a 'train' output directory")
    e.add_argument("--structure", default=None)
    e.add_argument("--roster", default=None)
    e.add_argument("--dataset", default=None)
    e.add_argument("--mode", choices=MODES, required=True)
    e.add_argument("--treatment", default=None)
    e.add_argument("--outcome", default=None)
    e.add_argument("--mc-samples", type=int, default=ev.MC_SAMPLES)
    e.add_argument("--passes", type=int, default=50)
    e.add_argument("--batch-size", type=int, default=100)
    e.add_argument("--sizes", default=None)
    e.add_argument("--seeds", default="0,1")
    e.add_argument("--cache", default=None, help="directory for cached capacity-sweep fits")
    e.add_argument("--n", type=int, default=None, help="capacity mode: rows per regime (default: dataset profile)")
    e.add_argument("--epochs", type=int, default=None, help="capacity mode: epochs (default: dataset profile)")
    e.add_argument("--out", default=None)

    r = sub.add_parser("rerun", help="repeat a run recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)

    p.set_defaults(default_out=default_out)
    return p


def _strip_out(argv: list[str]) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    if getattr(args, "out", None) is None:
        args.out = str(Path(args.default_out) / args.command)
    recorded = _strip_out(argv[1:])
    handlers = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "rerun": cmd_rerun}
    if args.command == "eval" and not args.checkpoints and args.mode != "capacity":
        print("ispn eval: error: no checkpoints given", file=sys.stderr)
        return 2
    try:
        return handlers[args.command](args, recorded)
    except (UsageError, BadRegimeSpec, UnknownDataset, UnknownVariable, ParseError) as exc:
        print(f"ispn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLoss as exc:
        print(f"ispn {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1
    except (SchemaMismatch, HashMismatch, UnknownRegime, IspnError, OSError) as exc:
        print(f"ispn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
