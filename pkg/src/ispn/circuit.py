"""Sum-product network structures with Gaussian leaves.

A :class:`CircuitStructure` is a topologically ordered node list. Parameters
live outside the structure in a :class:`ParameterVector` so a gate network can
supply a fresh set per causal regime. Evaluation happens in log space by
compiled kernels walking a CSR copy of the node list (see ``_kernels``).

Sum weights are locally normalised: each sum node applies a softmax to its own
logit slots. Leaf scales are ``softplus(raw) + SCALE_FLOOR``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np
from scipy.special import expit, log_ndtr

from . import _kernels as _k
from ._rat import LeafRegion, RatLayout, RatPlan, RootMix, SumRegion
from .errors import InvalidConfig, ShapeMismatch

SCALE_FLOOR = 1e-4
BINARY_THRESHOLD = 0.5
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Leaf:
    var: int
    slots: tuple[int, int]  # (mean slot, raw-scale slot + 1)


@dataclass(frozen=True)
class Product:
    children: tuple[int, ...]


@dataclass(frozen=True)
class Sum:
    children: tuple[int, ...]
    slots: tuple[int, int]  # half-open range into sum_logits


@dataclass(frozen=True)
class RatConfig:
    num_variables: int
    split_depth: int = 1
    num_repetitions: int = 1
    sums_per_region: int = 1
    leaves_per_region: int = 1
    seed: int = 0

    def check(self) -> None:
        n = self.num_variables
        if n < 2:
            raise InvalidConfig(f"need at least 2 variables, got {n}")
        max_depth = math.ceil(math.log2(n))
        if not 1 <= self.split_depth <= max_depth:
            raise InvalidConfig(f"split_depth must be in [1, {max_depth}] for {n} variables, got {self.split_depth}")
        for name in ("num_repetitions", "sums_per_region", "leaves_per_region"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")


@dataclass(frozen=True, eq=False)
class CircuitStructure:
    nodes: tuple
    root: int
    scopes: tuple[frozenset, ...]
    num_vars: int
    num_sum_weights: int
    num_leaf_params: int
    config: RatConfig | None = None

    @property
    def num_slots(self) -> int:
        return self.num_sum_weights + self.num_leaf_params

    def __len__(self):
        return len(self.nodes)

    def __eq__(self, other):
        if not isinstance(other, CircuitStructure):
            return NotImplemented
        return self.to_json() == other.to_json()

    def __hash__(self):
        return hash(self.to_json())

    @cached_property
    def plan(self) -> _Plan:
        """Generic per-node plan; works for any valid structure."""
        return _Plan(self)

    @cached_property
    def rat_plan(self) -> RatPlan | None:
        """Layer-wise plan, available when the nodes are exactly what
        ``build_rat(self.config)`` produces."""
        if self.config is None:
            return None
        try:
            ref, layout = _build_rat(self.config)
        except InvalidConfig:
            return None
        if ref.nodes != self.nodes or ref.root != self.root:
            return None
        return RatPlan(layout, self.plan.leaf_pos)

    # serialisation -----------------------------------------------------------------

    def to_dict(self) -> dict:
        nodes = []
        for nd in self.nodes:
            if isinstance(nd, Leaf):
                nodes.append({"type": "leaf", "var": nd.var, "slots": list(nd.slots)})
            elif isinstance(nd, Product):
                nodes.append({"type": "product", "children": list(nd.children)})
            else:
                nodes.append({"type": "sum", "children": list(nd.children), "slots": list(nd.slots)})
        return {
            "num_vars": self.num_vars,
            "root": self.root,
            "num_sum_weights": self.num_sum_weights,
            "num_leaf_params": self.num_leaf_params,
            "config": asdict(self.config) if self.config else None,
            "nodes": nodes,
            "scopes": [sorted(s) for s in self.scopes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> CircuitStructure:
        nodes = []
        for nd in d["nodes"]:
            if nd["type"] == "leaf":
                nodes.append(Leaf(int(nd["var"]), tuple(nd["slots"])))
            elif nd["type"] == "product":
                nodes.append(Product(tuple(nd["children"])))
            else:
                nodes.append(Sum(tuple(nd["children"]), tuple(nd["slots"])))
        return cls(
            tuple(nodes),
            int(d["root"]),
            tuple(frozenset(s) for s in d["scopes"]),
            int(d["num_vars"]),
            int(d["num_sum_weights"]),
            int(d["num_leaf_params"]),
            RatConfig(**d["config"]) if d.get("config") else None,
        )

    @classmethod
    def from_json(cls, text: str) -> CircuitStructure:
        return cls.from_dict(json.loads(text))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


class CircuitBuilder:
    """Append-only construction; slot ranges are assigned in creation order."""

    def __init__(self, num_vars: int):
        self.num_vars = num_vars
        self.nodes: list = []
        self.scopes: list[frozenset] = []
        self._w = 0
        self._p = 0

    def _add(self, node, scope) -> int:
        self.nodes.append(node)
        self.scopes.append(frozenset(scope))
        return len(self.nodes) - 1

    def leaf(self, var: int) -> int:
        if not 0 <= var < self.num_vars:
            raise InvalidConfig(f"leaf variable {var} out of range")
        node = Leaf(var, (self._p, self._p + 2))
        self._p += 2
        return self._add(node, {var})

    def product(self, children) -> int:
        children = tuple(children)
        return self._add(Product(children), frozenset().union(*(self.scopes[c] for c in children)))

    def sum(self, children) -> int:
        children = tuple(children)
        node = Sum(children, (self._w, self._w + len(children)))
        self._w += len(children)
        return self._add(node, frozenset().union(*(self.scopes[c] for c in children)))

    def build(self, root: int | None = None, config: RatConfig | None = None) -> CircuitStructure:
        root = len(self.nodes) - 1 if root is None else root
        return CircuitStructure(
            tuple(self.nodes), root, tuple(self.scopes), self.num_vars, self._w, self._p, config
        )


# ---------------------------------------------------------------------------- RAT


def _region_counts(n: int, depth: int, sums: int, leaves: int) -> tuple[int, int]:
    """(output count, sum-weight count) of a non-root region over ``n`` vars."""
    if depth == 0 or n == 1:
        return leaves, 0
    a, wa = _region_counts(n // 2, depth - 1, sums, leaves)
    b, wb = _region_counts(n - n // 2, depth - 1, sums, leaves)
    return sums, wa + wb + sums * a * b


def rat_slot_counts(config: RatConfig) -> tuple[int, int]:
    """``(num_sum_weights, num_leaf_params)`` that :func:`build_rat` will produce."""
    config.check()
    n, d = config.num_variables, config.split_depth
    s, i, r = config.sums_per_region, config.leaves_per_region, config.num_repetitions
    a, wa = _region_counts(n // 2, d - 1, s, i)
    b, wb = _region_counts(n - n // 2, d - 1, s, i)
    return r * (wa + wb + a * b), 2 * r * i * n


def _build_rat(config: RatConfig) -> tuple[CircuitStructure, RatLayout]:
    config.check()
    rng = np.random.default_rng(config.seed)
    b = CircuitBuilder(config.num_variables)
    S, I = config.sums_per_region, config.leaves_per_region
    regions: list = []

    def region(vars_, depth, is_root):
        if depth == 0 or len(vars_) == 1:
            outs, ids = [], []
            for _ in range(I):
                leaves = [b.leaf(int(v)) for v in sorted(vars_)]
                ids.append(leaves)
                outs.append(leaves[0] if len(leaves) == 1 else b.product(leaves))
            regions.append(LeafRegion(len(regions), np.array(ids, dtype=np.int64)))
            return regions[-1].rid, outs
        perm = [int(v) for v in rng.permutation(vars_)]
        half = len(perm) // 2
        lr, left = region(perm[:half], depth - 1, False)
        rr, right = region(perm[half:], depth - 1, False)
        prods = [b.product((l, r)) for l in left for r in right]
        if is_root:
            return (lr, rr), prods
        sums = [b.sum(prods) for _ in range(S)]
        slots = np.array([range(*b.nodes[i].slots) for i in sums], dtype=np.int64)
        regions.append(SumRegion(len(regions), lr, rr, slots))
        return regions[-1].rid, sums

    root_children, parts = [], []
    for _ in range(config.num_repetitions):
        lr_rr, prods = region(list(range(config.num_variables)), config.split_depth, True)
        parts.append(lr_rr)
        root_children.extend(prods)
    root = b.sum(root_children)
    layout = RatLayout(regions, RootMix(parts, np.arange(*b.nodes[root].slots)), len(regions))
    return b.build(root, config), layout


def build_rat(config: RatConfig) -> CircuitStructure:
    """Random region graph: each repetition recursively splits a random
    permutation of the variables in half ``split_depth`` times; region outputs
    are sums over the cross products of the two child regions, and all
    repetitions are mixed at a single root sum."""
    return _build_rat(config)[0]


def rat_config_for(
    num_variables: int,
    sum_weights: int,
    leaf_params: int | None = None,
    seed: int = 0,
    max_repetitions: int = 12,
    max_leaves: int = 8,
    max_sums: int = 80,
) -> RatConfig:
    """Smallest-error RAT hyperparameters for target slot counts.

    Error is the relative deviation in sum weights plus that in leaf params;
    ties prefer shallower and then smaller configs.
    """
    best = None
    max_depth = math.ceil(math.log2(num_variables))
    for d in range(1, max_depth + 1):
        for r in range(1, max_repetitions + 1):
            for i in range(1, max_leaves + 1):
                for s in range(1, max_sums + 1):
                    cfg = RatConfig(num_variables, d, r, s, i, seed)
                    w, p = rat_slot_counts(cfg)
                    err = abs(w - sum_weights) / sum_weights
                    if leaf_params:
                        err += abs(p - leaf_params) / leaf_params
                    key = (round(err, 9), d, w + p)
                    if best is None or key < best[0]:
                        best = (key, cfg)
                    if w > 2 * sum_weights:
                        break
    return best[1]


# ------------------------------------------------------------------------ validate


@dataclass
class ValidationReport:
    """First violating node id per category, ``None`` when the check passed."""

    acyclic: int | None = None
    scope: int | None = None
    completeness: int | None = None
    decomposability: int | None = None
    slots: int | None = None
    root_scope: bool = True

    @property
    def ok(self) -> bool:
        return self.root_scope and all(
            v is None for v in (self.acyclic, self.scope, self.completeness, self.decomposability, self.slots)
        )

    @property
    def violations(self) -> dict[str, int | bool]:
        out = {
            k: v
            for k, v in asdict(self).items()
            if k != "root_scope" and v is not None
        }
        if not self.root_scope:
            out["root_scope"] = False
        return out

    def __bool__(self):
        return self.ok


def validate(s: CircuitStructure) -> ValidationReport:
    rep = ValidationReport()
    n = len(s.nodes)
    scopes: list[frozenset] = []
    sum_seen = np.zeros(s.num_sum_weights, dtype=int)
    leaf_seen = np.zeros(s.num_leaf_params, dtype=int)

    def first(attr, i):
        if getattr(rep, attr) is None:
            setattr(rep, attr, i)

    for i, nd in enumerate(s.nodes):
        if isinstance(nd, Leaf):
            sc = frozenset({nd.var}) if 0 <= nd.var < s.num_vars else frozenset()
            if not sc:
                first("scope", i)
            a, b = nd.slots
            if b - a != 2 or a < 0 or b > s.num_leaf_params:
                first("slots", i)
            else:
                leaf_seen[a:b] += 1
        else:
            kids = nd.children
            if not kids or any(not (0 <= c < i) for c in kids):
                first("acyclic", i)
                kids = tuple(c for c in kids if 0 <= c < i)
            child_scopes = [scopes[c] for c in kids]
            sc = frozenset().union(*child_scopes)
            if isinstance(nd, Sum):
                if any(cs != child_scopes[0] for cs in child_scopes[1:]):
                    first("completeness", i)
                a, b = nd.slots
                if b - a != len(nd.children) or a < 0 or b > s.num_sum_weights:
                    first("slots", i)
                else:
                    sum_seen[a:b] += 1
            else:
                total = sum(len(cs) for cs in child_scopes)
                if total != len(sc) or len(set(kids)) != len(kids):
                    first("decomposability", i)
        scopes.append(sc)
        if i >= len(s.scopes) or s.scopes[i] != sc:
            first("scope", i)

    if len(s.scopes) != n:
        first("scope", min(len(s.scopes), n - 1))
    if np.any(sum_seen != 1) or np.any(leaf_seen != 1):
        # attribute to the first node touching a doubly used or orphan-adjacent slot
        bad_w = set(np.flatnonzero(sum_seen != 1))
        bad_p = set(np.flatnonzero(leaf_seen != 1))
        culprit = None
        for i, nd in enumerate(s.nodes):
            rng_ = range(*nd.slots) if not isinstance(nd, Product) else range(0)
            pool = bad_p if isinstance(nd, Leaf) else bad_w
            if pool.intersection(rng_):
                culprit = i
                break
        first("slots", culprit if culprit is not None else n - 1)
    if not (0 <= s.root < n) or scopes[s.root] != frozenset(range(s.num_vars)):
        rep.root_scope = False
    return rep


# ---------------------------------------------------------------------- parameters


@dataclass(frozen=True, eq=False)
class ParameterVector:
    sum_logits: np.ndarray
    leaf_params: np.ndarray  # per leaf: [mean, raw scale]

    @classmethod
    def from_flat(cls, flat, s: CircuitStructure) -> ParameterVector:
        flat = np.asarray(flat, dtype=float).ravel()
        if flat.shape[0] != s.num_slots:
            raise ShapeMismatch(f"expected {s.num_slots} parameters, got {flat.shape[0]}")
        return cls(flat[: s.num_sum_weights], flat[s.num_sum_weights :])

    @classmethod
    def zeros(cls, s: CircuitStructure) -> ParameterVector:
        return cls(np.zeros(s.num_sum_weights), np.zeros(s.num_leaf_params))

    @classmethod
    def random(cls, s: CircuitStructure, rng: np.random.Generator, scale: float = 1.0) -> ParameterVector:
        return cls(rng.normal(0, scale, s.num_sum_weights), rng.normal(0, scale, s.num_leaf_params))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.sum_logits, self.leaf_params])

    def check(self, s: CircuitStructure) -> None:
        if self.sum_logits.shape != (s.num_sum_weights,) or self.leaf_params.shape != (s.num_leaf_params,):
            raise ShapeMismatch(
                f"parameter shapes {self.sum_logits.shape}/{self.leaf_params.shape} do not match "
                f"structure slots ({s.num_sum_weights}, {s.num_leaf_params})"
            )


def softplus(x):
    return np.logaddexp(0.0, x)


def raw_scale_for(sigma: float) -> float:
    """Inverse of the leaf scale map, for building parameters by hand."""
    y = sigma - SCALE_FLOOR
    return float(y + np.log(-np.expm1(-y)))


# ------------------------------------------------------------------- compiled plan


class _Plan:
    """CSR view of the node list consumed by the compiled kernels."""

    def __init__(self, s: CircuitStructure):
        n = len(s.nodes)
        self.n_nodes = n
        kind = np.zeros(n, dtype=np.int8)
        ptr = np.zeros(n + 1, dtype=np.int64)
        slot0 = np.zeros(n, dtype=np.int64)
        leaf_pos = np.full(n, -1, dtype=np.int64)
        idx = []
        leaf_ids = []
        for i, nd in enumerate(s.nodes):
            if isinstance(nd, Leaf):
                kind[i] = _k.LEAF
                leaf_pos[i] = len(leaf_ids)
                leaf_ids.append(i)
            else:
                if any(not (0 <= c < i) for c in nd.children):
                    raise ShapeMismatch(f"node {i} has a child that does not precede it")
                kind[i] = _k.SUM if isinstance(nd, Sum) else _k.PRODUCT
                if isinstance(nd, Sum):
                    slot0[i] = nd.slots[0]
                idx.extend(nd.children)
            ptr[i + 1] = len(idx)
        self.kind, self.ptr, self.slot0, self.leaf_pos = kind, ptr, slot0, leaf_pos
        self.idx = np.array(idx, dtype=np.int64)
        self.leaf_ids = np.array(leaf_ids, dtype=np.int64)
        leaves = [s.nodes[i] for i in leaf_ids]
        self.leaf_var = np.array([l.var for l in leaves], dtype=np.int64)
        self.leaf_mean = np.array([l.slots[0] for l in leaves], dtype=np.int64)
        self.leaf_raw = self.leaf_mean + 1
        self.num_edges = len(idx)

    def logw(self, logits):
        return _k.log_softmax_sums(self.kind, self.ptr, self.slot0, np.ascontiguousarray(logits, dtype=float))

    def upward(self, leaf_vals, logw):
        return _k.upward(
            np.ascontiguousarray(leaf_vals), self.leaf_pos, self.kind, self.ptr, self.idx, self.slot0, logw
        )


@dataclass
class _Cache:
    root: np.ndarray
    x: np.ndarray
    observed: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    raw: np.ndarray
    logw: np.ndarray | None = None
    values: np.ndarray | None = None
    rat: tuple | None = None
    cell: np.ndarray | None = None  # leaves scored by a half-line cell
    sign: np.ndarray | None = None


def _log_interval(a, b):
    """``log(Phi(b) - Phi(a))`` for standardised bounds ``a <= b``."""
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    lhi = log_ndtr(hi)
    llo = log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lhi + np.log1p(-np.exp(llo - lhi))
    return np.where(hi <= lo, -np.inf, out)


def _prepare(s: CircuitStructure, psi: ParameterVector, x, marginalized):
    psi.check(s)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != s.num_vars:
        raise ShapeMismatch(f"rows must have {s.num_vars} values, got shape {x.shape}")
    if marginalized is None:
        marg = np.zeros(x.shape, dtype=bool)
    else:
        try:
            marg = np.broadcast_to(np.asarray(marginalized, dtype=bool), x.shape)
        except ValueError:
            raise ShapeMismatch(f"marginalized mask does not fit rows of shape {x.shape}") from None
    return x, marg, single


def _leaf_scales(s, psi):
    plan = s.plan
    mu = psi.leaf_params[plan.leaf_mean]
    raw = psi.leaf_params[plan.leaf_raw]
    return mu, raw, softplus(raw) + SCALE_FLOOR


def _root_values(s, psi, leaf_vals, keep=False, generic=False):
    """Root log-values from leaf log-values; also returns the backward cache."""
    if not generic and s.rat_plan is not None:
        root, cache = s.rat_plan.forward(leaf_vals, psi.sum_logits, keep=keep)
        return root, ("rat", cache)
    plan = s.plan
    logw = plan.logw(psi.sum_logits)
    V = plan.upward(leaf_vals, logw)
    return V[:, s.root], ("generic", (V, logw))


def _discrete_leaves(s, discrete):
    if discrete is None:
        return None
    d = np.asarray(discrete, dtype=bool)
    if d.shape != (s.num_vars,):
        raise ShapeMismatch(f"discrete mask needs {s.num_vars} entries, got shape {d.shape}")
    return d[s.plan.leaf_var] if d.any() else None


def _forward(s, psi, x, marginalized, keep=False, generic=False, discrete=None):
    x, marg, single = _prepare(s, psi, x, marginalized)
    plan = s.plan
    mu, raw, sigma = _leaf_scales(s, psi)
    xl = x[:, plan.leaf_var]
    observed = ~marg[:, plan.leaf_var]
    z = (np.where(observed, xl, 0.0) - mu) / sigma
    logp = np.where(observed, -0.5 * z * z - np.log(sigma) - _HALF_LOG_2PI, 0.0)
    cell = _discrete_leaves(s, discrete)
    sign = None
    if cell is not None:
        # log P(X > t) = log Phi((mu - t) / sigma), log P(X <= t) = log Phi(-(mu - t) / sigma)
        sign = np.where(xl > BINARY_THRESHOLD, 1.0, -1.0)
        t = sign * (mu - BINARY_THRESHOLD) / sigma
        logp = np.where(observed & cell, log_ndtr(t), logp)
    root, inner = _root_values(s, psi, logp, keep=keep, generic=generic)
    cache = _Cache(root, xl, observed, mu, sigma, raw, cell=cell, sign=sign)
    if inner[0] == "rat":
        cache.rat = inner[1]
    else:
        cache.values, cache.logw = inner[1]
    return cache, single


def node_log_values(s: CircuitStructure, psi: ParameterVector, x, marginalized=None) -> np.ndarray:
    """Log value of every node, shape ``(rows, nodes)``."""
    cache, _ = _forward(s, psi, x, marginalized, generic=True)
    return cache.values


def log_density(
    s: CircuitStructure, psi: ParameterVector, x, marginalized=None, generic: bool = False, discrete=None
):
    """Root log-density for one row (scalar) or a batch of rows (1-d array).

    ``marginalized`` masks variables whose leaves evaluate to ``log 1``;
    ``generic`` forces the per-node evaluator even for RAT circuits.
    ``discrete`` (one flag per variable) scores those variables by the
    probability of their cell, ``X > 0.5`` if the value exceeds 0.5 and
    ``X <= 0.5`` otherwise, instead of by density.
    """
    cache, single = _forward(s, psi, x, marginalized, generic=generic, discrete=discrete)
    return float(cache.root[0]) if single else cache.root


def log_prob_box(s: CircuitStructure, psi: ParameterVector, lower, upper, generic: bool = False):
    """Log probability of the axis-aligned box ``lower < X <= upper`` per row.

    Infinite bounds marginalise a variable."""
    lower = np.atleast_2d(np.asarray(lower, dtype=float))
    upper = np.atleast_2d(np.asarray(upper, dtype=float))
    lower, upper = np.broadcast_arrays(lower, upper)
    psi.check(s)
    if lower.shape[1] != s.num_vars:
        raise ShapeMismatch(f"rows must have {s.num_vars} values, got {lower.shape[1]}")
    plan = s.plan
    mu, _, sigma = _leaf_scales(s, psi)
    a = (lower[:, plan.leaf_var] - mu) / sigma
    b = (upper[:, plan.leaf_var] - mu) / sigma
    root, _ = _root_values(s, psi, _log_interval(a, b), generic=generic)
    return root


def marginal_curve(s: CircuitStructure, psi: ParameterVector, variable: int, grid) -> np.ndarray:
    """Density of one variable at each grid value, all others marginalised."""
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ShapeMismatch("grid must be non-empty")
    if not 0 <= variable < s.num_vars:
        raise ShapeMismatch(f"variable {variable} out of range")
    x = np.zeros((grid.size, s.num_vars))
    x[:, variable] = grid
    marg = np.ones(s.num_vars, dtype=bool)
    marg[variable] = False
    return np.exp(log_density(s, psi, x, marg))


def interval_masses(s: CircuitStructure, psi: ParameterVector, variable: int, edges) -> np.ndarray:
    """Probability of each interval ``(edges[j], edges[j + 1]]`` of one
    variable, all others marginalised."""
    edges = np.asarray(edges, dtype=float)
    m = len(edges) - 1
    if m < 1:
        raise ShapeMismatch("need at least two interval edges")
    lower = np.full((m, s.num_vars), -np.inf)
    upper = np.full((m, s.num_vars), np.inf)
    lower[:, variable] = edges[:-1]
    upper[:, variable] = edges[1:]
    return np.exp(log_prob_box(s, psi, lower, upper))


def binary_masses(s: CircuitStructure, psi: ParameterVector, variable: int, threshold: float = 0.5) -> np.ndarray:
    """``[P(X <= threshold), P(X > threshold)]`` for one variable."""
    return interval_masses(s, psi, variable, [-np.inf, threshold, np.inf])


# ------------------------------------------------------------------------ backward


def log_density_and_grad(
    s: CircuitStructure,
    psi: ParameterVector,
    x,
    marginalized=None,
    row_weights=None,
    generic: bool = False,
    discrete=None,
):
    """Per-row log-densities and the gradient of ``sum_b w_b log p(x_b)`` with
    respect to the parameters, returned as a :class:`ParameterVector`.
    ``discrete`` is as in :func:`log_density`."""
    cache, _ = _forward(s, psi, x, marginalized, keep=True, generic=generic, discrete=discrete)
    B = cache.root.shape[0]
    w = np.ones(B) if row_weights is None else np.ascontiguousarray(row_weights, dtype=float)
    plan = s.plan
    if cache.rat is not None:
        g_leaf, d_logits = s.rat_plan.backward(cache.rat, w, len(plan.leaf_ids), s.num_sum_weights)
    else:
        g_leaf, d_logits = _k.downward(
            cache.values, w, s.root, plan.leaf_pos, len(plan.leaf_ids),
            plan.kind, plan.ptr, plan.idx, plan.slot0, cache.logw,
        )
    g_leaf = np.where(cache.observed, g_leaf, 0.0)
    diff = np.where(cache.observed, cache.x - cache.mu, 0.0)
    inv = 1.0 / cache.sigma
    dmu = diff * inv**2
    dsig = diff**2 * inv**3 - inv
    if cache.cell is not None:
        # d/dt log Phi(t) = phi(t) / Phi(t), with t = sign * (mu - 0.5) / sigma
        t = cache.sign * (cache.mu - BINARY_THRESHOLD) * inv
        r = cache.sign * np.exp(-0.5 * t * t - _HALF_LOG_2PI - log_ndtr(t))
        dmu = np.where(cache.cell, r * inv, dmu)
        dsig = np.where(cache.cell, -r * t * cache.sign * inv, dsig)
    d_mu = (g_leaf * dmu).sum(axis=0)
    d_sigma = (g_leaf * dsig).sum(axis=0)
    d_leaf = np.zeros(s.num_leaf_params)
    d_leaf[plan.leaf_mean] = d_mu
    d_leaf[plan.leaf_raw] = d_sigma * expit(cache.raw)
    return cache.root, ParameterVector(d_logits, d_leaf)


def circuit_backward(s: CircuitStructure, psi: ParameterVector, x, marginalized=None) -> ParameterVector:
    """Gradient of ``log p(x)`` (summed over rows for a batch) w.r.t. ``psi``."""
    _, grad = log_density_and_grad(s, psi, x, marginalized)
    return grad
