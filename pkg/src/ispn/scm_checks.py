"""Statistical checks of intervention semantics on sampled data.

* Autonomy: a variable that is not intervened on keeps its conditional
  distribution given its parents. Binary variables with binary parents are
  compared within each parent configuration. Otherwise a pooled polynomial
  regression of the variable on its parents is fitted and the residual
  distributions are compared within coarse parent strata.
* Truncated factorisation: a variable set by a parent-free intervention is
  independent of each of its former parents.

Both use Pearson chi-square statistics summed over strata.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .scm import Dataset, Scm, apply_intervention, sample, uniform_roster


@dataclass(frozen=True)
class ChiSquareResult:
    kind: str  # "autonomy" | "independence"
    regime: str
    variable: str
    other: str  # parent (independence) or baseline regime (autonomy)
    statistic: float
    dof: int
    p_value: float

    def passed(self, alpha: float = 0.01) -> bool:
        return self.p_value > alpha


def _table_chi2(table: np.ndarray) -> tuple[float, int]:
    """Pearson statistic and dof of a contingency table after dropping empty
    rows and columns; degenerate tables contribute nothing."""
    t = np.asarray(table, dtype=float)
    t = t[t.sum(axis=1) > 0][:, t.sum(axis=0) > 0]
    if t.shape[0] < 2 or t.shape[1] < 2:
        return 0.0, 0
    expected = np.outer(t.sum(axis=1), t.sum(axis=0)) / t.sum()
    return float(((t - expected) ** 2 / expected).sum()), (t.shape[0] - 1) * (t.shape[1] - 1)


def _codes(col: np.ndarray, binary: bool, bins: int, ref: np.ndarray | None = None) -> np.ndarray:
    if binary:
        return col.astype(np.int64)
    ref = col if ref is None else ref
    cuts = np.unique(np.quantile(ref, np.linspace(0, 1, bins + 1)[1:-1]))
    return np.searchsorted(cuts, col, side="right")


def _stratified(group: np.ndarray, value: np.ndarray, strata: np.ndarray, min_expected: float = 5.0) -> tuple[float, int]:
    """Sum of per-stratum chi-square statistics for ``group x value``.

    Strata with a single group or value carry no information and are
    skipped, as are strata whose smallest expected count is below
    ``min_expected``. Pooling them instead would mix strata with different
    conditionals and manufacture an association."""
    stat, dof = 0.0, 0
    ng, nv = group.max() + 1, value.max() + 1
    order = np.argsort(strata, kind="stable")
    bounds = np.flatnonzero(np.diff(strata[order])) + 1
    for sel in np.split(order, bounds):
        t = np.zeros((ng, nv))
        np.add.at(t, (group[sel], value[sel]), 1)
        r, c = t.sum(axis=1), t.sum(axis=0)
        r, c = r[r > 0], c[c > 0]
        if r.size < 2 or c.size < 2 or np.outer(r, c).min() / t.sum() < min_expected:
            continue
        a, b = _table_chi2(t)
        stat += a
        dof += b
    return stat, dof


def _p(stat, dof) -> float:
    return float(stats.chi2.sf(stat, dof)) if dof > 0 else 1.0


def _design(parents: np.ndarray, degree: int = 2) -> np.ndarray:
    cols = [np.ones(len(parents))]
    for j in range(parents.shape[1]):
        for d in range(1, degree + 1):
            cols.append(parents[:, j] ** d)
    return np.column_stack(cols)


def autonomy_test(scm: Scm, base: Dataset, other: Dataset, variable: str, value_bins: int = 10, parent_bins: int = 5) -> ChiSquareResult:
    """Compare ``p(X | pa(X))`` between two datasets drawn from regimes that
    both leave ``X``'s mechanism untouched."""
    g = scm.graph
    i = g.index(variable)
    pa = [g.index(p) for p in g.parents(variable)]
    xb, xo = base.values[:, i], other.values[:, i]
    x = np.concatenate([xb, xo])
    group = np.concatenate([np.zeros(len(xb), dtype=np.int64), np.ones(len(xo), dtype=np.int64)])
    P = np.concatenate([base.values[:, pa], other.values[:, pa]]) if pa else np.zeros((len(x), 0))
    binary = scm.domains[i].is_binary
    all_binary = binary and all(scm.domains[j].is_binary for j in pa)
    if all_binary:
        strata = (P.astype(np.int64) @ (1 << np.arange(len(pa), dtype=np.int64))) if pa else np.zeros(len(x), dtype=np.int64)
        value = x.astype(np.int64)
    else:
        if pa and not binary:
            X = _design(P)
            coef, *_ = np.linalg.lstsq(X, x, rcond=None)
            resid = x - X @ coef
        else:
            resid = x
        value = _codes(resid, binary, value_bins)
        strata = np.zeros(len(x), dtype=np.int64)
        for j, col in enumerate(P.T):
            strata = strata * (parent_bins + 1) + _codes(col, scm.domains[pa[j]].is_binary, parent_bins)
    stat, dof = _stratified(group, value, strata)
    return ChiSquareResult("autonomy", other.intervention.label, variable, base.intervention.label, stat, dof, _p(stat, dof))


def independence_test(scm: Scm, ds: Dataset, variable: str, parent: str, bins: int = 10) -> ChiSquareResult:
    """Chi-square test of independence between two columns of one dataset."""
    g = scm.graph
    i, j = g.index(variable), g.index(parent)
    a = _codes(ds.values[:, i], scm.domains[i].is_binary, bins)
    b = _codes(ds.values[:, j], scm.domains[j].is_binary, bins)
    stat, dof = _stratified(a, b, np.zeros(len(a), dtype=np.int64))
    return ChiSquareResult("independence", ds.intervention.label, variable, parent, stat, dof, _p(stat, dof))


def holm(p_values, alpha: float = 0.01) -> np.ndarray:
    """Holm step-down rejections at family-wise level ``alpha``."""
    p = np.asarray(p_values, dtype=float)
    reject = np.zeros(p.size, dtype=bool)
    for rank, k in enumerate(np.argsort(p, kind="stable")):
        if p[k] > alpha / (p.size - rank):
            break
        reject[k] = True
    return reject


def property_suite(scm: Scm, n: int = 100_000, seed: int = 0) -> list[ChiSquareResult]:
    """Both checks for every single-variable uniform intervention against the
    observational regime. Each regime gets its own data seed."""
    roster = uniform_roster(scm)
    data = [sample(apply_intervention(scm, iv), n, seed * 1000 + k) for k, iv in enumerate(roster)]
    base = data[0]
    out = []
    for iv, ds in zip(roster[1:], data[1:]):
        (target, _), = iv.targets
        for v in scm.names:
            if v != target:
                out.append(autonomy_test(scm, base, ds, v))
        for p in scm.graph.parents(target):
            out.append(independence_test(scm, ds, target, p))
    return out
