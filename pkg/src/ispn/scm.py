"""Structural causal models: graphs, mechanisms, interventions, sampling, and
exact enumeration for small all-binary networks."""
from __future__ import annotations

import dataclasses
import itertools
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import distributions as dists
from .distributions import Bernoulli, Distribution, Uniform
from .errors import (
    BadRegimeSpec,
    InconsistentEvidence,
    InvalidDistribution,
    InvalidScm,
    TooLarge,
    UnknownVariable,
    ZeroSupport,
)

MAX_ENUMERATION_VARS = 20


# --------------------------------------------------------------------------- graph


class CausalGraph:
    """Immutable DAG over named variables; ``adj[i, j] == 1`` iff ``i -> j``."""

    __slots__ = ("names", "adj", "_index", "_order")

    def __init__(self, names: Sequence[str], adj):
        names = tuple(str(n) for n in names)
        adj = np.array(adj, dtype=np.int8)
        n = len(names)
        if adj.shape != (n, n):
            raise InvalidScm(f"adjacency must be {n}x{n}, got {adj.shape}")
        if len(set(names)) != n:
            raise InvalidScm("variable names must be unique")
        if not np.isin(adj, (0, 1)).all():
            raise InvalidScm("adjacency entries must be 0 or 1")
        if np.any(np.diag(adj)):
            raise InvalidScm("self loops are not allowed")
        adj.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "adj", adj)
        object.__setattr__(self, "_index", {name: i for i, name in enumerate(names)})
        object.__setattr__(self, "_order", self._toposort())

    def __copy__(self):
        return self

    def __deepcopy__(self, memo):
        return self

    def __setattr__(self, key, value):
        raise AttributeError("CausalGraph is immutable")

    @classmethod
    def from_edges(cls, names: Sequence[str], edges: Sequence[tuple[str, str]]) -> CausalGraph:
        index = {name: i for i, name in enumerate(names)}
        adj = np.zeros((len(names), len(names)), dtype=np.int8)
        for src, dst in edges:
            for v in (src, dst):
                if v not in index:
                    raise UnknownVariable(v)
            adj[index[src], index[dst]] = 1
        return cls(names, adj)

    def _toposort(self) -> tuple[int, ...]:
        indeg = self.adj.sum(axis=0).astype(int)
        ready = [i for i in range(self.n) if indeg[i] == 0]
        order = []
        while ready:
            i = ready.pop(0)
            order.append(i)
            for j in np.flatnonzero(self.adj[i]):
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(int(j))
        if len(order) != self.n:
            raise InvalidScm("graph contains a cycle")
        return tuple(order)

    @property
    def n(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownVariable(name) from None

    def parents(self, name: str) -> tuple[str, ...]:
        j = self.index(name)
        return tuple(self.names[i] for i in np.flatnonzero(self.adj[:, j]))

    def edges(self) -> list[tuple[str, str]]:
        return [(self.names[i], self.names[j]) for i, j in zip(*np.nonzero(self.adj))]

    @property
    def topological_order(self) -> tuple[int, ...]:
        return self._order

    def __eq__(self, other):
        if not isinstance(other, CausalGraph):
            return NotImplemented
        return self.names == other.names and np.array_equal(self.adj, other.adj)

    def __hash__(self):
        return hash((self.names, self.adj.tobytes()))

    def __repr__(self):
        return f"CausalGraph({list(self.names)}, edges={self.edges()})"


# ---------------------------------------------------------------------- mechanisms


@dataclass(frozen=True)
class Domain:
    kind: str  # "binary" | "continuous"
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("binary", "continuous"):
            raise InvalidScm(f"unknown domain kind {self.kind!r}")
        if not self.lo < self.hi:
            raise InvalidScm(f"domain needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def is_binary(self) -> bool:
        return self.kind == "binary"

    @property
    def width(self) -> float:
        return self.hi - self.lo


BINARY = Domain("binary")


@dataclass(frozen=True)
class Structural:
    """``X := f(parents, noise)`` with ``f`` looked up by ``equation`` id.

    ``cpt`` mechanisms store ``P(X=1 | parent state)`` in ``params``, indexed by
    the parent states read as a binary number (first parent most significant).
    Their noise is an implicit U(0, 1) draw.
    """

    equation: str
    parents: tuple[str, ...]
    params: tuple[float, ...]
    noise: Distribution | None = None


@dataclass(frozen=True)
class PerfectDistribution:
    dist: Distribution
    parents: tuple[str, ...] = field(default=(), init=False)


@dataclass(frozen=True)
class Atomic:
    value: float
    parents: tuple[str, ...] = field(default=(), init=False)


Mechanism = Union[Structural, PerfectDistribution, Atomic]


def _check_equation(mech: Structural) -> None:
    k = len(mech.parents)
    n = len(mech.params)
    expected = {
        "cpt": 2**k,
        "linear": 1 + k,
        "abs_linear": 1 + k,
        "quadratic": 1 + 2 * k,
    }
    if mech.equation not in expected:
        raise InvalidScm(f"unknown equation id {mech.equation!r}")
    if n != expected[mech.equation]:
        raise InvalidScm(
            f"equation {mech.equation!r} with {k} parents takes {expected[mech.equation]} params, got {n}"
        )
    if mech.equation == "cpt":
        p = np.asarray(mech.params)
        if np.any((p < 0) | (p > 1)):
            raise InvalidScm("cpt probabilities must lie in [0, 1]")
    elif mech.noise is None:
        raise InvalidScm(f"equation {mech.equation!r} needs a noise spec")


def _evaluate(mech: Structural, pa: list[np.ndarray], rng: np.random.Generator, n: int) -> np.ndarray:
    p = mech.params
    if mech.equation == "cpt":
        idx = np.zeros(n, dtype=np.int64)
        for col in pa:
            idx = (idx << 1) | col.astype(np.int64)
        p1 = np.asarray(p)[idx]
        return (rng.random(n) < p1).astype(float)
    noise = mech.noise.sample(rng, n)
    if mech.equation in ("linear", "abs_linear"):
        out = p[0] + noise
        for w, col in zip(p[1:], pa):
            out = out + w * col
        return np.abs(out) if mech.equation == "abs_linear" else out
    if mech.equation == "quadratic":
        out = p[0] + noise
        for i, col in enumerate(pa):
            out = out + p[1 + 2 * i] * col + p[2 + 2 * i] * col**2
        return out
    raise InvalidScm(f"unknown equation id {mech.equation!r}")


# -------------------------------------------------------------------- interventions


@dataclass(frozen=True)
class Intervention:
    """Mechanism replacements keyed by variable name; empty means observational."""

    targets: tuple[tuple[str, Mechanism], ...] = ()

    def __post_init__(self):
        names = [t for t, _ in self.targets]
        if len(set(names)) != len(names):
            raise InvalidScm("intervention targets must be distinct")
        for name, mech in self.targets:
            if not isinstance(mech, (PerfectDistribution, Atomic)):
                raise InvalidScm(f"intervention on {name!r} must be perfect or atomic")
        object.__setattr__(self, "targets", tuple(sorted(self.targets, key=lambda t: t[0])))

    @classmethod
    def of(cls, mapping: Mapping[str, Mechanism | Distribution | float] | None = None, **kw) -> Intervention:
        items = dict(mapping or {}, **kw)
        targets = []
        for name, m in items.items():
            if isinstance(m, Distribution):
                m = PerfectDistribution(m)
            elif not isinstance(m, (PerfectDistribution, Atomic)):
                m = Atomic(float(m))
            targets.append((name, m))
        return cls(tuple(targets))

    @property
    def is_empty(self) -> bool:
        return not self.targets

    def as_dict(self) -> dict[str, Mechanism]:
        return dict(self.targets)

    def __contains__(self, name):
        return any(t == name for t, _ in self.targets)

    def merged(self, other: Intervention) -> Intervention:
        d = self.as_dict()
        d.update(other.as_dict())
        return Intervention(tuple(d.items()))

    def to_dict(self) -> dict:
        out = {}
        for name, m in self.targets:
            if isinstance(m, Atomic):
                out[name] = {"kind": "atomic", "value": m.value}
            else:
                out[name] = {"kind": "distribution", **m.dist.to_dict()}
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> Intervention:
        targets = []
        for name, spec in d.items():
            spec = dict(spec)
            kind = spec.pop("kind")
            if kind == "atomic":
                targets.append((name, Atomic(float(spec["value"]))))
            else:
                targets.append((name, PerfectDistribution(dists.from_dict(spec))))
        return cls(tuple(targets))

    @property
    def label(self) -> str:
        if self.is_empty:
            return "obs"
        parts = []
        for name, m in self.targets:
            parts.append(f"{name}={_mech_label(m)}")
        return "do:" + "&".join(parts)


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def _mech_label(m: Mechanism) -> str:
    if isinstance(m, Atomic):
        return _fmt(m.value)
    d = m.dist
    args = ",".join(_fmt(getattr(d, f.name)) for f in dataclasses.fields(d))
    short = {"bernoulli": None, "gaussian": "gauss", "indicator": "ind"}.get(d.family, d.family)
    if d.family == "bernoulli":
        return f"bern{_fmt(d.p)}"
    return f"{short}:{args}"


# ------------------------------------------------------------------------------ scm


@dataclass(frozen=True)
class Scm:
    graph: CausalGraph
    mechanisms: tuple[Mechanism, ...]
    domains: tuple[Domain, ...]
    intervention: Intervention = Intervention()

    def __post_init__(self):
        n = self.graph.n
        if len(self.mechanisms) != n or len(self.domains) != n:
            raise InvalidScm("need one mechanism and one domain per variable")
        for name, mech in zip(self.graph.names, self.mechanisms):
            if isinstance(mech, Structural):
                if set(mech.parents) != set(self.graph.parents(name)) or len(set(mech.parents)) != len(mech.parents):
                    raise InvalidScm(
                        f"mechanism parents {mech.parents} of {name!r} do not match graph parents "
                        f"{self.graph.parents(name)}"
                    )
                _check_equation(mech)
                if mech.equation == "cpt" and not self.domain(name).is_binary:
                    raise InvalidScm(f"cpt mechanism on non-binary variable {name!r}")
            elif self.graph.parents(name):
                raise InvalidScm(f"intervened variable {name!r} still has parents in the graph")

    @property
    def names(self) -> tuple[str, ...]:
        return self.graph.names

    @property
    def n(self) -> int:
        return self.graph.n

    def mechanism(self, name: str) -> Mechanism:
        return self.mechanisms[self.graph.index(name)]

    def domain(self, name: str) -> Domain:
        return self.domains[self.graph.index(name)]

    @property
    def is_binary(self) -> bool:
        return all(d.is_binary for d in self.domains)


@dataclass(frozen=True, eq=False)
class Dataset:
    values: np.ndarray
    intervention: Intervention
    graph: CausalGraph
    seed: int
    domains: tuple[Domain, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] != self.graph.n:
            raise InvalidScm(f"dataset must be K x {self.graph.n} with K > 0, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def names(self) -> tuple[str, ...]:
        return self.graph.names

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.graph.index(name)]

    def __len__(self):
        return self.values.shape[0]


# ------------------------------------------------------------------------ operations


def mutilate(graph: CausalGraph, iv: Intervention) -> CausalGraph:
    """Drop every incoming edge of each intervened variable."""
    adj = graph.adj.copy()
    for name, _ in iv.targets:
        adj[:, graph.index(name)] = 0
    return CausalGraph(graph.names, adj)


def apply_intervention(scm: Scm, iv: Intervention) -> Scm:
    for name, mech in iv.targets:
        dom = scm.domain(name)
        if dom.is_binary and isinstance(mech, Atomic) and mech.value not in (0.0, 1.0):
            raise InvalidScm(f"atomic value {mech.value} outside binary domain of {name!r}")
    if iv.is_empty:
        return scm
    mechs = list(scm.mechanisms)
    for name, mech in iv.targets:
        mechs[scm.graph.index(name)] = mech
    return Scm(mutilate(scm.graph, iv), tuple(mechs), scm.domains, scm.intervention.merged(iv))


def sample(scm: Scm, n: int, seed: int) -> Dataset:
    """Ancestral sampling; variable ``i`` always draws from its own child stream
    of ``SeedSequence(seed)``, so untouched mechanisms see identical noise
    across interventions."""
    if n <= 0:
        raise ValueError(f"sample size must be positive, got {n}")
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(scm.n)]
    out = np.empty((n, scm.n))
    for i in scm.graph.topological_order:
        mech = scm.mechanisms[i]
        dom = scm.domains[i]
        rng = streams[i]
        if isinstance(mech, Atomic):
            col = np.full(n, float(mech.value))
        elif isinstance(mech, PerfectDistribution):
            col = mech.dist.sample(rng, n)
        else:
            pa = [out[:, scm.graph.index(p)] for p in mech.parents]
            col = _evaluate(mech, pa, rng, n)
            if not dom.is_binary:
                col = np.clip(col, dom.lo, dom.hi)
        out[:, i] = col
    return Dataset(out, scm.intervention, scm.graph, int(seed), scm.domains)


# ----------------------------------------------------------------- exact enumeration


def _all_states(n: int) -> np.ndarray:
    codes = np.arange(2**n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    return ((codes[:, None] >> shifts[None, :]) & 1).astype(np.int8)


def _factor(scm: Scm, i: int, states: np.ndarray) -> np.ndarray:
    mech = scm.mechanisms[i]
    x = states[:, i]
    if isinstance(mech, Atomic):
        return (x == mech.value).astype(float)
    if isinstance(mech, PerfectDistribution):
        support = mech.dist.support()
        if support is None:
            raise InvalidDistribution("exact enumeration needs a finite-support intervention")
        f = np.zeros(len(x))
        for value, prob in support:
            if value not in (0.0, 1.0):
                if prob > 0:
                    raise InvalidDistribution(f"intervention atom {value} is outside the binary domain")
                continue
            f += np.where(x == value, prob, 0.0)
        return f
    if mech.equation != "cpt":
        raise InvalidScm("exact enumeration needs cpt mechanisms")
    idx = np.zeros(len(x), dtype=np.int64)
    for p in mech.parents:
        idx = (idx << 1) | states[:, scm.graph.index(p)]
    p1 = np.asarray(mech.params)[idx]
    return np.where(x == 1, p1, 1.0 - p1)


def joint_table(scm: Scm, iv: Intervention | None = None) -> tuple[np.ndarray, np.ndarray]:
    """All ``2**N`` states and their probability under the (intervened) model,
    using the truncated factorization."""
    if scm.n > MAX_ENUMERATION_VARS:
        raise TooLarge(f"{scm.n} variables exceeds the enumeration bound {MAX_ENUMERATION_VARS}")
    if not scm.is_binary:
        raise InvalidScm("exact enumeration needs all-binary variables")
    model = apply_intervention(scm, iv) if iv is not None else scm
    states = _all_states(model.n)
    probs = np.ones(len(states))
    for i in range(model.n):
        probs *= _factor(model, i, states)
    return states, probs


def _mask(scm: Scm, states: np.ndarray, assignment: Mapping[str, float] | None) -> np.ndarray:
    m = np.ones(len(states), dtype=bool)
    for name, value in (assignment or {}).items():
        m &= states[:, scm.graph.index(name)] == int(value)
    return m


def exact_query(
    scm: Scm,
    iv: Intervention | None,
    query: str,
    evidence: Mapping[str, float] | None = None,
) -> np.ndarray:
    """Exact ``[P(query=0), P(query=1)]`` under ``do(iv)``, optionally
    conditioned on ``evidence``."""
    q = scm.graph.index(query)
    for name in evidence or {}:
        scm.graph.index(name)
    states, probs = joint_table(scm, iv)
    m = _mask(scm, states, evidence)
    z = probs[m].sum()
    if z <= 0:
        raise InconsistentEvidence(f"evidence {dict(evidence or {})} has probability zero")
    p1 = probs[m & (states[:, q] == 1)].sum() / z
    p0 = probs[m & (states[:, q] == 0)].sum() / z
    return np.array([p0, p1])


def exact_ate(scm: Scm, treatment: str, outcome: str) -> float:
    """``E[outcome | do(treatment=1)] - E[outcome | do(treatment=0)]``."""
    hi = exact_query(scm, Intervention.of({treatment: 1.0}), outcome)[1]
    lo = exact_query(scm, Intervention.of({treatment: 0.0}), outcome)[1]
    return float(hi - lo)


def adjustment_estimate(
    scm: Scm,
    treatment: tuple[str, float],
    outcome: str,
    adjustment_set: Sequence[str],
    outcome_value: float = 1.0,
) -> float:
    """``sum_w P(outcome | treatment, w) P(w)`` from the unmutilated joint."""
    t_name, t_value = treatment
    adjustment_set = list(adjustment_set)
    for name in [t_name, outcome, *adjustment_set]:
        scm.graph.index(name)
    if t_name in adjustment_set or outcome in adjustment_set:
        raise ValueError("adjustment set must be disjoint from treatment and outcome")
    states, probs = joint_table(scm)
    t_mask = _mask(scm, states, {t_name: t_value})
    y_mask = states[:, scm.graph.index(outcome)] == int(outcome_value)
    total = 0.0
    for w in itertools.product((0, 1), repeat=len(adjustment_set)):
        w_mask = _mask(scm, states, dict(zip(adjustment_set, w)))
        p_w = probs[w_mask].sum()
        p_tw = probs[w_mask & t_mask].sum()
        if p_tw <= 0:
            raise ZeroSupport(f"P({t_name}={t_value}, {dict(zip(adjustment_set, w))}) = 0")
        total += probs[w_mask & t_mask & y_mask].sum() / p_tw * p_w
    return float(total)


# --------------------------------------------------------------------------- regimes


def _parse_value(text: str, name: str, dom: Domain) -> Mechanism:
    text = text.strip()
    try:
        if text == "uniform":
            return PerfectDistribution(Bernoulli(0.5) if dom.is_binary else Uniform(dom.lo, dom.hi))
        if text.startswith("bern"):
            return PerfectDistribution(Bernoulli(float(text[4:])))
        if ":" in text:
            family, args = text.split(":", 1)
            family = {"gauss": "gaussian", "ind": "indicator"}.get(family, family)
            return PerfectDistribution(dists.make(family, args.split(",")))
        return Atomic(float(text))
    except (ValueError, InvalidDistribution) as exc:
        raise BadRegimeSpec(f"cannot parse intervention value {text!r} for {name!r}: {exc}") from None


def parse_regime(spec: str, scm: Scm) -> Intervention:
    """Parse ``obs`` or ``do:<var>=<value>[&<var>=<value>...]``.

    Values: a constant, ``uniform``, ``uniform:a,b``, ``bern<p>``,
    ``gauss:mu,sigma``, ``gamma:p,q``, ``beta:a,b,l,k``, ``ind:x1,x2``.
    """
    spec = spec.strip()
    if spec == "obs":
        return Intervention()
    if not spec.startswith("do:"):
        raise BadRegimeSpec(f"regime must be 'obs' or start with 'do:', got {spec!r}")
    targets = {}
    for part in spec[3:].split("&"):
        if "=" not in part:
            raise BadRegimeSpec(f"missing '=' in {part!r}")
        name, value = part.split("=", 1)
        name = name.strip()
        if name not in scm.names:
            raise BadRegimeSpec(f"unknown variable {name!r} in regime {spec!r}")
        if name in targets:
            raise BadRegimeSpec(f"variable {name!r} intervened twice in {spec!r}")
        targets[name] = _parse_value(value, name, scm.domain(name))
    iv = Intervention(tuple(targets.items()))
    try:
        apply_intervention(scm, iv)
    except InvalidScm as exc:
        raise BadRegimeSpec(str(exc)) from None
    return iv


def uniform_roster(scm: Scm, include_observational: bool = True) -> list[Intervention]:
    """Observational regime plus one uniform randomisation per variable."""
    out = [Intervention()] if include_observational else []
    for name in scm.names:
        out.append(parse_regime(f"do:{name}=uniform", scm))
    return out

