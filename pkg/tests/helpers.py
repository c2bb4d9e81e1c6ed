"""Independent oracles and generators shared by the test modules."""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import stats

from ispn.circuit import (
    CircuitBuilder,
    CircuitStructure,
    Leaf,
    ParameterVector,
    Product,
    Sum,
)

# ------------------------------------------------------------------ random circuits


def random_circuit(rng: np.random.Generator, max_nodes: int = 20, max_vars: int = 4) -> CircuitStructure:
    """A random valid circuit (complete and decomposable) with at most
    ``max_nodes`` nodes, built by recursive scope partitioning."""
    while True:
        n = int(rng.integers(1, max_vars + 1))
        b = CircuitBuilder(n)
        budget = [max_nodes]

        def gen(scope, depth):
            budget[0] -= 1
            if budget[0] < 0:
                raise OverflowError
            if len(scope) == 1 and (depth > 2 or rng.random() < 0.5):
                return b.leaf(scope[0])
            if len(scope) > 1 and rng.random() < 0.6:
                perm = list(rng.permutation(scope))
                k = int(rng.integers(2, len(scope) + 1))
                cuts = sorted(rng.choice(np.arange(1, len(scope)), size=k - 1, replace=False))
                parts = [perm[i:j] for i, j in zip([0, *cuts], [*cuts, len(scope)])]
                return b.product([gen([int(v) for v in p], depth + 1) for p in parts])
            k = int(rng.integers(1, 4))
            return b.sum([gen(scope, depth + 1) for _ in range(k)])

        try:
            root = gen(list(range(n)), 0)
        except OverflowError:
            continue
        return b.build(root)


def random_params(s: CircuitStructure, rng: np.random.Generator) -> ParameterVector:
    logits = rng.normal(0, 1.5, s.num_sum_weights)
    leaf = np.empty(s.num_leaf_params)
    leaf[0::2] = rng.normal(0, 1, s.num_leaf_params // 2)
    leaf[1::2] = rng.normal(0, 0.7, s.num_leaf_params // 2)
    return ParameterVector(logits, leaf)


# ------------------------------------------------------------- polynomial oracle


def expand(s: CircuitStructure, psi: ParameterVector) -> list[tuple[float, tuple[int, ...]]]:
    """Network polynomial of the root as a list of ``(coefficient, leaf ids)``
    monomials, built from explicit softmax weights."""
    terms: list[list[tuple[float, tuple[int, ...]]]] = []
    for i, nd in enumerate(s.nodes):
        if isinstance(nd, Leaf):
            terms.append([(1.0, (i,))])
        elif isinstance(nd, Product):
            out = []
            for combo in itertools.product(*(terms[c] for c in nd.children)):
                coef = math.prod(t[0] for t in combo)
                out.append((coef, tuple(sorted(sum((t[1] for t in combo), ())))))
            terms.append(out)
        else:
            a, b = nd.slots
            z = [math.exp(v) for v in psi.sum_logits[a:b]]
            tot = math.fsum(z)
            out = []
            for w, c in zip(z, nd.children):
                out.extend((w / tot * coef, mono) for coef, mono in terms[c])
            terms.append(out)
    return terms[s.root]


def leaf_scale(raw: float) -> float:
    return math.log1p(math.exp(raw)) + 1e-4 if raw < 30 else raw + 1e-4


def oracle_density(s: CircuitStructure, psi: ParameterVector, x, marginalized=None) -> float:
    marg = np.zeros(s.num_vars, bool) if marginalized is None else np.asarray(marginalized, bool)
    vals = {}
    for i, nd in enumerate(s.nodes):
        if isinstance(nd, Leaf):
            if marg[nd.var]:
                vals[i] = 1.0
            else:
                mu, raw = psi.leaf_params[nd.slots[0]], psi.leaf_params[nd.slots[0] + 1]
                vals[i] = float(stats.norm.pdf(x[nd.var], mu, leaf_scale(raw)))
    return math.fsum(coef * math.prod(vals[j] for j in mono) for coef, mono in expand(s, psi))


# ------------------------------------------------------------------- corruption


def recompute_scopes(nodes, num_vars):
    scopes = []
    for nd in nodes:
        if isinstance(nd, Leaf):
            scopes.append(frozenset({nd.var}))
        else:
            scopes.append(frozenset().union(*(scopes[c] for c in nd.children)))
    return tuple(scopes)


def rebuild(s: CircuitStructure, nodes) -> CircuitStructure:
    nodes = tuple(nodes)
    return CircuitStructure(nodes, s.root, recompute_scopes(nodes, s.num_vars), s.num_vars, s.num_sum_weights, s.num_leaf_params)


def corrupt_completeness(s: CircuitStructure, rng):
    """Swap one child of some sum node for an earlier node with another scope.
    Returns ``(structure, node id)`` or ``None`` if no such edit exists."""
    cands = []
    for i, nd in enumerate(s.nodes):
        if isinstance(nd, Sum) and len(nd.children) >= 2:
            for k, c in enumerate(nd.children):
                others = [j for j in range(i) if s.scopes[j] != s.scopes[c] and j not in nd.children]
                if others:
                    cands.append((i, k, others))
    if not cands:
        return None
    i, k, others = cands[rng.integers(len(cands))]
    nd = s.nodes[i]
    kids = list(nd.children)
    kids[k] = int(others[rng.integers(len(others))])
    nodes = list(s.nodes)
    nodes[i] = Sum(tuple(kids), nd.slots)
    return rebuild(s, nodes), i


def corrupt_decomposability(s: CircuitStructure, rng):
    """Replace one child of some product node with an earlier node whose
    scope overlaps a sibling's."""
    cands = []
    for i, nd in enumerate(s.nodes):
        if isinstance(nd, Product) and len(nd.children) >= 2:
            for k in range(len(nd.children)):
                sib = frozenset().union(*(s.scopes[c] for j, c in enumerate(nd.children) if j != k))
                others = [j for j in range(i) if s.scopes[j] & sib and j not in nd.children]
                if others:
                    cands.append((i, k, others))
    if not cands:
        return None
    i, k, others = cands[rng.integers(len(cands))]
    nd = s.nodes[i]
    kids = list(nd.children)
    kids[k] = int(others[rng.integers(len(others))])
    nodes = list(s.nodes)
    nodes[i] = Product(tuple(kids))
    return rebuild(s, nodes), i


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
