"""Quantitative evaluation: marginals, divergences, treatment effects,
capacity sweeps, and timing."""
from __future__ import annotations

import csv
import json
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import circuit as C
from .distributions import Bernoulli
from .errors import SupportMismatch, UnknownRegime
from .experiments import fit, profile, rat_config
from .gate import gate_backward, gate_forward
from .model import Ispn
from .scm import Atomic, Intervention, PerfectDistribution, Scm, apply_intervention, exact_query, sample, uniform_roster
from .specfile import load_builtin

NUM_BINS = 100
CONTINUOUS_RANGE = (0.0, 100.0)
MC_SAMPLES = 1_000_000


def bin_edges(num_bins: int = NUM_BINS, lo: float = CONTINUOUS_RANGE[0], hi: float = CONTINUOUS_RANGE[1]) -> np.ndarray:
    return np.linspace(lo, hi, num_bins + 1)


def _as_dist(p, name):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise SupportMismatch(f"{name} must be a non-empty 1-d vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise SupportMismatch(f"{name} has negative or non-finite entries")
    tot = p.sum()
    if tot <= 0:
        raise SupportMismatch(f"{name} has no mass")
    return p / tot


def _kl_to_mid(p, s):
    # KL(p || s/2) written as p*log(2p/s): halving s can underflow subnormals
    nz = p > 0
    return float(np.sum(p[nz] * np.log(2 * p[nz] / s[nz])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; inputs are renormalised."""
    p = _as_dist(p, "p")
    q = _as_dist(q, "q")
    if p.shape != q.shape:
        raise SupportMismatch(f"support sizes differ: {p.size} vs {q.size}")
    s = p + q
    return 0.5 * (_kl_to_mid(p, s) + _kl_to_mid(q, s))


# ------------------------------------------------------------------ ground truth


class GroundTruth:
    """Reference marginals for one SCM: exact enumeration for binary
    variables, otherwise a binned Monte Carlo histogram."""

    def __init__(self, scm: Scm, edges=None, mc_samples: int = MC_SAMPLES, seed: int = 12345):
        self.scm = scm
        self.edges = bin_edges() if edges is None else np.asarray(edges, dtype=float)
        self.mc_samples = mc_samples
        self.seed = seed
        self._mc: dict[str, np.ndarray] = {}

    def samples(self, iv: Intervention) -> np.ndarray:
        if iv.label not in self._mc:
            ds = sample(apply_intervention(self.scm, iv), self.mc_samples, self.seed)
            self._mc[iv.label] = ds.values
        return self._mc[iv.label]

    def marginal(self, iv: Intervention, variable: str) -> np.ndarray:
        if self.scm.domain(variable).is_binary and self.scm.is_binary:
            return exact_query(self.scm, iv, variable)
        return self.histogram(iv, variable)

    def histogram(self, iv: Intervention, variable: str, edges=None) -> np.ndarray:
        col = self.samples(iv)[:, self.scm.graph.index(variable)]
        if self.scm.domain(variable).is_binary:
            h = np.array([np.sum(col == 0.0), np.sum(col == 1.0)], dtype=float)
        else:
            e = self.edges if edges is None else edges
            h = np.histogram(np.clip(col, e[0], e[-1]), e)[0].astype(float)
        return h / h.sum()


def model_marginal(model: Ispn, iv: Intervention, variable: str, edges=None) -> np.ndarray:
    """Binary variables: ``[P(X <= 0.5), P(X > 0.5)]``; continuous: masses of
    the bins given by ``edges`` (default 100 bins on [0, 100]), renormalised."""
    if not model.knows(iv):
        raise UnknownRegime(f"regime {iv.label!r} was not part of training")
    i = model.schema.index(variable)
    if model.schema.domains[i].is_binary:
        return model.binary_masses(iv, variable)
    e = bin_edges() if edges is None else np.asarray(edges, dtype=float)
    m = model.interval_masses(iv, variable, e)
    return m / m.sum()


def expectation(model: Ispn, iv: Intervention, variable: str) -> float:
    m = model_marginal(model, iv, variable)
    if model.schema.domains[model.schema.index(variable)].is_binary:
        return float(m[1])
    e = bin_edges()
    return float(np.dot(m, 0.5 * (e[:-1] + e[1:])))


def model_ate(model: Ispn, treatment: str, outcome: str) -> float:
    """``E[Y | do(T=1)] - E[Y | do(T=0)]`` from the two atomic regimes. If those
    were not trained but ``do(T=U)`` was, each term is read off that regime as
    ``P(Y=1, T=t) / P(T=t)``, valid because ``T`` has no parents there."""
    one = Intervention.of({treatment: Atomic(1.0)})
    zero = Intervention.of({treatment: Atomic(0.0)})
    if model.knows(one) and model.knows(zero):
        return expectation(model, one, outcome) - expectation(model, zero, outcome)
    uni = Intervention.of({treatment: PerfectDistribution(Bernoulli(0.5))})
    if not model.knows(uni):
        raise UnknownRegime(f"need do({treatment}=0) and do({treatment}=1), or do({treatment}=U)")
    t, y = model.schema.index(treatment), model.schema.index(outcome)
    n = len(model.schema.names)
    psi = model.params(uni)
    out = []
    for tv in (0.0, 1.0):
        lo = np.full((2, n), -np.inf)
        hi = np.full((2, n), np.inf)
        lo[:, t], hi[:, t] = (-np.inf, 0.5) if tv == 0 else (0.5, np.inf)
        lo[0, y] = 0.5  # row 0: joint with Y=1; row 1: T alone
        lp = C.log_prob_box(model.structure, psi, lo, hi)
        out.append(float(np.exp(lp[0] - lp[1])))
    return out[1] - out[0]


def naive_difference(scm: Scm, treatment: str, outcome: str) -> float:
    """``P(Y=1 | T=1) - P(Y=1 | T=0)`` under the observational joint."""
    e = Intervention()
    p1 = exact_query(scm, e, outcome, {treatment: 1})[1]
    p0 = exact_query(scm, e, outcome, {treatment: 0})[1]
    return float(p1 - p0)


# ----------------------------------------------------------------------- reports


@dataclass
class MarginalCell:
    regime: str
    variable: str
    support: list[float]  # bin edges, or [0, 1] for binary
    truth: list[float]
    model_mean: list[float]
    per_seed: list[list[float]]
    jsd: list[float]  # per seed


@dataclass
class MarginalReport:
    dataset: str
    cells: list[MarginalCell] = field(default_factory=list)

    def per_variable(self, skip_observational: bool = True) -> dict[str, tuple[float, float, int]]:
        """Mean, std, and count of per-seed JSD per query variable, pooled over
        regimes that intervene on some other variable."""
        out: dict[str, list[float]] = {}
        for c in self.cells:
            if skip_observational and c.regime == "obs":
                continue
            out.setdefault(c.variable, []).extend(c.jsd)
        return {v: (float(np.mean(x)), float(np.std(x)), len(x)) for v, x in out.items()}

    def write_csv(self, path, run_id: str | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            if run_id:
                fh.write(f"# run_id={run_id}\n")
            w = csv.writer(fh)
            w.writerow(["variable", "jsd_mean", "jsd_std", "cells"])
            for v, (m, s, k) in self.per_variable().items():
                w.writerow([v, f"{m:.6f}", f"{s:.6f}", k])
        return path

    def write_json(self, path, run_id: str | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"run_id": run_id, "dataset": self.dataset, "cells": [asdict(c) for c in self.cells]}
        path.write_text(json.dumps(doc, indent=None) + "\n")
        return path


def marginal_report(
    dataset: str,
    scm: Scm,
    models: Sequence[Ispn],
    regimes: Sequence[Intervention] | None = None,
    truth: GroundTruth | None = None,
    include_intervened: bool = False,
) -> MarginalReport:
    """One cell per (regime, variable); intervened variables are skipped
    unless ``include_intervened``."""
    regimes = uniform_roster(scm) if regimes is None else regimes
    truth = truth or GroundTruth(scm)
    rep = MarginalReport(dataset)
    for iv in regimes:
        for v in scm.names:
            if v in iv and not include_intervened:
                continue
            t = truth.marginal(iv, v)
            qs = [model_marginal(m, iv, v, truth.edges) for m in models]
            support = [0.0, 1.0] if scm.domain(v).is_binary else truth.edges.tolist()
            rep.cells.append(
                MarginalCell(
                    iv.label, v, support, t.tolist(), np.mean(qs, axis=0).tolist(),
                    [q.tolist() for q in qs], [jsd(t, q) for q in qs],
                )
            )
    return rep


@dataclass
class AteReport:
    dataset: str
    treatment: str
    outcome: str
    oracle: float
    naive: float | None
    per_seed: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed))

    def write_csv(self, path, run_id: str | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            if run_id:
                fh.write(f"# run_id={run_id}\n")
            w = csv.writer(fh)
            w.writerow(["dataset", "treatment", "outcome", "oracle", "naive", "model_mean", "model_std", *[f"seed{i}" for i in range(len(self.per_seed))]])
            naive = "" if self.naive is None else f"{self.naive:.6f}"
            w.writerow([self.dataset, self.treatment, self.outcome, f"{self.oracle:.6f}", naive, f"{self.mean:.6f}", f"{self.std:.6f}", *[f"{a:.6f}" for a in self.per_seed]])
        return path


# -------------------------------------------------------------------- capacity


@dataclass
class SweepEntry:
    size: int
    config: dict
    num_sum_weights: int
    num_leaf_params: int
    num_nodes: int
    num_edges: int
    report: MarginalReport

    @property
    def mean_jsd(self) -> float:
        vals = [m for m, _, _ in self.report.per_variable().values()]
        return float(np.mean(vals))


def capacity_sweep(dataset: str, sizes: Sequence[int], seeds: Sequence[int], cache_dir=None, **fit_kw) -> list[SweepEntry]:
    """Train one model per (size, seed) on the uniform roster and report
    per-size marginals."""
    scm = load_builtin(dataset)
    prof = profile(dataset)
    truth = GroundTruth(scm)
    out = []
    for size in sizes:
        rat = rat_config(prof, scm.n, size)
        fits = [fit(dataset, s, rat=rat, cache_dir=cache_dir, scm=scm, **fit_kw) for s in seeds]
        s = fits[0].structure
        rep = marginal_report(dataset, scm, [f.model for f in fits], truth=truth)
        out.append(SweepEntry(size, asdict(rat), s.num_sum_weights, s.num_leaf_params, len(s.nodes), s.plan.num_edges, rep))
    return out


def write_sweep(path, dataset: str, entries: Sequence[SweepEntry], run_id: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    variables = list(entries[0].report.per_variable()) if entries else []
    with path.open("w", newline="") as fh:
        if run_id:
            fh.write(f"# run_id={run_id}\n")
        w = csv.writer(fh)
        w.writerow(["dataset", "size", "num_sum_weights", "num_leaf_params", "nodes", "mean_jsd", *variables])
        for e in entries:
            pv = e.report.per_variable()
            w.writerow([dataset, e.size, e.num_sum_weights, e.num_leaf_params, e.num_nodes, f"{e.mean_jsd:.6f}", *[f"{pv[v][0]:.6f}" for v in variables]])
    return path


# ---------------------------------------------------------------------- runtime


@dataclass
class Timing:
    label: str
    seconds: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.seconds))

    @property
    def std(self) -> float:
        return float(np.std(self.seconds))

    @property
    def cv(self) -> float:
        return self.std / self.mean if self.mean > 0 else 0.0


def time_training_pass(model: Ispn, roster, batch_size: int) -> float:
    """Wall time of one forward and backward sweep over every roster row
    (the work of one epoch, without parameter updates)."""
    t0 = time.perf_counter()
    for ds in roster:
        enc = model.encode(ds.intervention)
        z = model.norm.forward(ds.values)
        for i in range(0, len(ds), batch_size):
            psi, cache = gate_forward(model.net, enc)
            x = z[i : i + batch_size]
            _, d = C.log_density_and_grad(
                model.structure, psi, x, row_weights=np.full(len(x), -1.0 / len(x)), discrete=model.discrete
            )
            gate_backward(model.net, cache, d, accumulate=False)
    return time.perf_counter() - t0


def time_marginal_queries(structure, psi, variable: int = 0, count: int = 1000, generic: bool = False, rng=None) -> float:
    """Wall time of ``count`` single-variable marginal density queries,
    evaluated as one batch."""
    rng = rng or np.random.default_rng(0)
    n = structure.num_vars
    x = np.zeros((count, n))
    x[:, variable] = rng.normal(size=count)
    marg = np.ones(n, dtype=bool)
    marg[variable] = False
    t0 = time.perf_counter()
    C.log_density(structure, psi, x, marg, generic=generic)
    return time.perf_counter() - t0


def runtime_bench(model: Ispn, roster, passes: int, batch_size: int = 100, queries: int = 1000) -> list[Timing]:
    if passes < 1:
        raise ValueError("passes must be >= 1")
    psi = model.params(roster[0].intervention)
    train_t = [time_training_pass(model, roster, batch_size) for _ in range(passes)]
    query_t = [time_marginal_queries(model.structure, psi, count=queries) for _ in range(passes)]
    return [Timing("training_pass", train_t), Timing(f"marginal_queries_{queries}", query_t)]


def write_timings(path, timings: Sequence[Timing], run_id: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if run_id:
            fh.write(f"# run_id={run_id}\n")
        w = csv.writer(fh)
        w.writerow(["measure", "passes", "mean_s", "std_s", "cv"])
        for t in timings:
            w.writerow([t.label, len(t.seconds), f"{t.mean:.6f}", f"{t.std:.6f}", f"{t.cv:.4f}"])
    return path


@dataclass
class ScalingFit:
    x: list[float]
    y: list[float]
    slope: float
    intercept: float
    r2: float


def linear_fit(x, y) -> ScalingFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return ScalingFit(x.tolist(), y.tolist(), float(coef[0]), float(coef[1]), r2)


def latency_scaling(structures, count: int = 1000, repeats: int = 7, generic: bool = True, seed: int = 0) -> dict[str, ScalingFit]:
    """Best-of-``repeats`` marginal-query latency per structure, fitted linearly against
    node count and against edge count."""
    rng = np.random.default_rng(seed)
    lat, nodes, edges = [], [], []
    for s in structures:
        psi = C.ParameterVector.random(s, rng)
        time_marginal_queries(s, psi, count=count, generic=generic)  # warm-up
        # the minimum: scheduler noise only ever adds time
        lat.append(min(time_marginal_queries(s, psi, count=count, generic=generic) for _ in range(repeats)))
        nodes.append(len(s.nodes))
        edges.append(s.plan.num_edges)
    return {"nodes": linear_fit(nodes, lat), "edges": linear_fit(edges, lat)}
