"""Text spec files for SCMs/CBNs and CSV+JSON dataset files.

Spec format, one directive per line (``#`` starts a comment)::

    vars 5
    var Burglary binary
    var Health cont 0 100
    edge Burglary Alarm
    cpt Alarm 3 0.05 0.95          # parent-state index, P(X=0), P(X=1)
    mech Health quadratic 35 0 -0.003 0.5 0 noise normal 0 6

Parents of a variable are ordered as their ``edge`` lines appear. CPT rows are
indexed by the parents' states read as a binary number, first parent most
significant, i.e. lexicographic parent order.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from importlib import resources
from pathlib import Path

import numpy as np

from . import distributions as dists
from .errors import CptRowNotNormalized, InvalidDistribution, InvalidScm, ParseError, UnknownDataset
from .scm import BINARY, CausalGraph, Dataset, Domain, Intervention, Scm, Structural

CPT_TOLERANCE = 1e-9
BUILTIN = ("asia", "earthquake", "cancer", "health")


def _floats(tokens, lineno, field):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected numbers, got {tokens}", lineno, field) from None


def parse_scm(text: str) -> Scm:
    declared = None
    names: list[str] = []
    domains: dict[str, Domain] = {}
    parents: dict[str, list[str]] = {}
    cpts: dict[str, dict[int, float]] = {}
    mechs: dict[str, tuple[str, list[float], object, int]] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kw = tok[0]
        if kw == "vars":
            if len(tok) != 2 or not tok[1].isdigit():
                raise ParseError("expected 'vars <N>'", lineno, "vars")
            declared = int(tok[1])
        elif kw == "var":
            if len(tok) < 3:
                raise ParseError("expected 'var <name> <binary|cont lo hi>'", lineno, "var")
            name = tok[1]
            if name in domains:
                raise ParseError(f"variable {name!r} declared twice", lineno, "var")
            if tok[2] == "binary" and len(tok) == 3:
                domains[name] = BINARY
            elif tok[2] == "cont" and len(tok) == 5:
                lo, hi = _floats(tok[3:5], lineno, "domain")
                try:
                    domains[name] = Domain("continuous", lo, hi)
                except InvalidScm as exc:
                    raise ParseError(str(exc), lineno, "domain") from None
            else:
                raise ParseError(f"bad domain {' '.join(tok[2:])!r}", lineno, "domain")
            names.append(name)
            parents[name] = []
        elif kw == "edge":
            if len(tok) != 3:
                raise ParseError("expected 'edge <src> <dst>'", lineno, "edge")
            src, dst = tok[1:]
            for v in (src, dst):
                if v not in domains:
                    raise ParseError(f"edge references undeclared variable {v!r}", lineno, "edge")
            if src in parents[dst]:
                raise ParseError(f"duplicate edge {src} -> {dst}", lineno, "edge")
            parents[dst].append(src)
        elif kw == "cpt":
            if len(tok) != 5:
                raise ParseError("expected 'cpt <var> <parent-state-index> <p0> <p1>'", lineno, "cpt")
            name = tok[1]
            if name not in domains:
                raise ParseError(f"cpt for undeclared variable {name!r}", lineno, "cpt")
            if not tok[2].isdigit():
                raise ParseError(f"bad parent-state index {tok[2]!r}", lineno, "parent-state-index")
            idx = int(tok[2])
            p0, p1 = _floats(tok[3:5], lineno, "probabilities")
            if min(p0, p1) < 0:
                raise ParseError("negative probability", lineno, "probabilities")
            if abs(p0 + p1 - 1.0) > CPT_TOLERANCE:
                raise CptRowNotNormalized(f"row sums to {p0 + p1!r}", lineno, f"cpt {name} {idx}")
            row = cpts.setdefault(name, {})
            if idx in row:
                raise ParseError(f"duplicate cpt row {idx} for {name!r}", lineno, "parent-state-index")
            row[idx] = p1
        elif kw == "mech":
            if len(tok) < 3:
                raise ParseError("expected 'mech <var> <equation> <params...> [noise <family> <args...>]'", lineno, "mech")
            name, eq = tok[1], tok[2]
            if name not in domains:
                raise ParseError(f"mech for undeclared variable {name!r}", lineno, "mech")
            rest = tok[3:]
            noise = None
            if "noise" in rest:
                k = rest.index("noise")
                if k + 1 >= len(rest):
                    raise ParseError("missing noise family", lineno, "noise")
                try:
                    noise = dists.make(rest[k + 1], _floats(rest[k + 2 :], lineno, "noise"))
                except InvalidDistribution as exc:
                    raise ParseError(str(exc), lineno, "noise") from None
                rest = rest[:k]
            mechs[name] = (eq, _floats(rest, lineno, "params"), noise, lineno)
        else:
            raise ParseError(f"unknown directive {kw!r}", lineno, kw)

    if declared is None:
        raise ParseError("missing 'vars' header", None, "vars")
    if declared != len(names):
        raise ParseError(f"header declares {declared} variables, found {len(names)}", None, "vars")

    mechanisms = []
    for name in names:
        pa = tuple(parents[name])
        if name in cpts:
            rows = cpts[name]
            want = 2 ** len(pa)
            if sorted(rows) != list(range(want)):
                raise ParseError(f"cpt for {name!r} needs rows 0..{want - 1}, got {sorted(rows)}", None, f"cpt {name}")
            mechanisms.append(Structural("cpt", pa, tuple(rows[i] for i in range(want))))
        elif name in mechs:
            eq, params, noise, lineno = mechs[name]
            mechanisms.append(Structural(eq, pa, tuple(params), noise))
        else:
            raise ParseError(f"no cpt or mech for variable {name!r}", None, name)

    edges = [(p, name) for name in names for p in parents[name]]
    try:
        graph = CausalGraph.from_edges(names, edges)
        return Scm(graph, tuple(mechanisms), tuple(domains[n] for n in names))
    except InvalidScm as exc:
        raise ParseError(str(exc)) from None


def load_cbn(path) -> Scm:
    return parse_scm(Path(path).read_text())


def load_builtin(name: str) -> Scm:
    if name not in BUILTIN:
        raise UnknownDataset(name)
    text = resources.files("ispn.data").joinpath(f"{name}.scm").read_text()
    return parse_scm(text)


def _g(x: float) -> str:
    return repr(float(x))


def dump_scm(scm: Scm) -> str:
    if not scm.intervention.is_empty:
        raise InvalidScm("only unintervened SCMs can be written as spec files")
    lines = [f"vars {scm.n}"]
    for name, dom in zip(scm.names, scm.domains):
        lines.append(f"var {name} binary" if dom.is_binary else f"var {name} cont {_g(dom.lo)} {_g(dom.hi)}")
    for name, mech in zip(scm.names, scm.mechanisms):
        for p in mech.parents:
            lines.append(f"edge {p} {name}")
    for name, mech in zip(scm.names, scm.mechanisms):
        if mech.equation == "cpt":
            for i, p1 in enumerate(mech.params):
                lines.append(f"cpt {name} {i} {_g(1.0 - p1)} {_g(p1)}")
        else:
            d = mech.noise
            args = " ".join(_g(getattr(d, f.name)) for f in dataclasses.fields(d))
            params = " ".join(_g(p) for p in mech.params)
            lines.append(f"mech {name} {mech.equation} {params} noise {d.family} {args}")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------------- datasets


def write_dataset(ds: Dataset, csv_path, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (header of names) and the ``<stem>.json`` sidecar."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ds.names)
        for row in ds.values:
            w.writerow([repr(float(v)) for v in row])
    meta = {
        "intervention": ds.intervention.to_dict(),
        "regime": ds.intervention.label,
        "seed": ds.seed,
        "n": len(ds),
        "names": list(ds.names),
        "graph": ds.graph.adj.astype(int).tolist(),
        "domains": [[d.kind, d.lo, d.hi] for d in ds.domains],
    }
    if extra:
        meta.update(extra)
    json_path = csv_path.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=1) + "\n")
    return csv_path, json_path


def read_dataset(csv_path) -> Dataset:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    with csv_path.open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        values = np.array([[float(v) for v in row] for row in r])
    if header != meta["names"]:
        raise ParseError(f"csv header {header} does not match sidecar names {meta['names']}")
    graph = CausalGraph(meta["names"], meta["graph"])
    domains = tuple(Domain(k, lo, hi) for k, lo, hi in meta.get("domains", []))
    return Dataset(values, Intervention.from_dict(meta["intervention"]), graph, int(meta["seed"]), domains)
