"""Maximum conditional log-likelihood training over a roster of regimes.

Every mini-batch holds rows of a single regime, so one gate forward pass
provides the circuit parameters for the whole batch. Within an epoch each
regime's rows are shuffled and cut into batches, and the batches of the
different regimes are interleaved round-robin.
"""
from __future__ import annotations

import csv
import time
from collections import Counter
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import circuit as C
from .circuit import CircuitStructure
from .errors import InvalidConfig, NonFiniteLoss, SchemaMismatch, ShapeMismatch
from .gate import GateNetwork, gate_backward, gate_forward
from .model import Ispn, Schema, _key
from .scm import CausalGraph, Dataset


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    hidden: tuple[int, ...] = (10, 10)
    roster: tuple[Dataset, ...] = field(default=(), repr=False)

    def check(self) -> None:
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if not self.seeds:
            raise InvalidConfig("need at least one seed")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "roster"}
        d["seeds"] = list(self.seeds)
        d["hidden"] = list(self.hidden)
        d["optimizer"] = "adam"
        d["roster"] = [{"regime": ds.intervention.label, "n": len(ds), "seed": ds.seed} for ds in self.roster]
        return d


class Adam:
    def __init__(self, size: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    regime: str
    mean_loglik: float
    wall_ms: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    elapsed_ms: list[float] = field(default_factory=list)  # cumulative, one per epoch
    pairs: Counter = field(default_factory=Counter)  # (row regime, gate regime) -> rows
    checkpoint: str | None = None

    @property
    def epochs(self) -> int:
        return len(self.elapsed_ms)

    def curve(self, regime: str = "all") -> np.ndarray:
        return np.array([r.mean_loglik for r in self.records if r.regime == regime])

    def write_csv(self, path, run_id: str | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            if run_id:
                fh.write(f"# run_id={run_id}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "regime", "mean_loglik", "wall_ms"])
            for r in self.records:
                w.writerow([r.epoch, r.regime, repr(r.mean_loglik), f"{r.wall_ms:.3f}"])
        return path


def check_roster(roster: Sequence[Dataset]) -> Schema:
    """All datasets must share names, domains, and the unintervened graph."""
    if not roster:
        raise SchemaMismatch("roster is empty")
    first = roster[0]
    for ds in roster[1:]:
        if ds.names != first.names:
            raise SchemaMismatch(f"variable order {ds.names} differs from {first.names}")
        if tuple(ds.domains) != tuple(first.domains):
            raise SchemaMismatch(f"domains of regime {ds.intervention.label!r} differ")
    # recover the base graph: union of edges, since mutilation only removes
    adj = np.zeros_like(first.graph.adj)
    for ds in roster:
        adj = np.maximum(adj, ds.graph.adj)
    base = CausalGraph(first.names, adj)
    labels = [ds.intervention.label for ds in roster]
    if len(set(labels)) != len(labels):
        raise SchemaMismatch(f"duplicate regimes in roster: {labels}")
    if not first.domains:
        raise SchemaMismatch("datasets carry no domain information")
    return Schema(base, tuple(first.domains))


def init_gate(structure: CircuitStructure, hidden=(10, 10), seed: int = 0) -> GateNetwork:
    return GateNetwork.create(structure, hidden, np.random.default_rng([seed, 1]))


class _Regime:
    """Standardised rows of one dataset, with duplicate binary rows merged
    when the whole table is binary."""

    def __init__(self, ds: Dataset, model: Ispn):
        self.label = ds.intervention.label
        self.enc = model.encode(ds.intervention)
        self.z = np.ascontiguousarray(model.norm.forward(ds.values))
        self.n = len(ds)
        self.binary = all(d.is_binary for d in ds.domains)
        if self.binary:
            self.codes = ds.values.astype(np.int64) @ (1 << np.arange(ds.values.shape[1], dtype=np.int64))
        self.jac = model.norm.log_jacobian()

    def batch(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unique rows and their weights (row counts over the batch size)."""
        B = rows.size
        if not self.binary:
            return self.z[rows], np.full(B, 1.0 / B)
        _, first, counts = np.unique(self.codes[rows], return_index=True, return_counts=True)
        return self.z[rows[first]], counts / B


def _batches(regimes: list[_Regime], batch_size: int, rng: np.random.Generator):
    per = []
    for r in regimes:
        perm = rng.permutation(r.n)
        per.append([perm[i : i + batch_size] for i in range(0, r.n, batch_size)])
    longest = max(len(p) for p in per)
    for k in range(longest):
        for i, p in enumerate(per):
            if k < len(p):
                yield i, k, p[k]


def batch_step(structure: CircuitStructure, net: GateNetwork, enc, x, weights, discrete=None) -> tuple[float, np.ndarray]:
    """Weighted negative log-likelihood ``-sum_b weights_b log p(x_b)`` and its
    gradient with respect to ``theta``. Variables flagged in ``discrete`` are
    scored by the probability of their binary cell."""
    psi, cache = gate_forward(net, enc)
    lp, dpsi = C.log_density_and_grad(structure, psi, x, row_weights=-np.asarray(weights), discrete=discrete)
    loss = -float(np.dot(weights, lp))
    return loss, gate_backward(net, cache, dpsi, accumulate=False)


def train(
    cfg: TrainConfig,
    structure: CircuitStructure,
    net: GateNetwork,
    roster: Sequence[Dataset] | None = None,
    seed: int | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[np.ndarray, TrainLog, Ispn]:
    """Train ``net`` in place; returns the final ``theta``, the log, and the
    model wrapper with every roster regime registered."""
    cfg.check()
    roster = tuple(cfg.roster if roster is None else roster)
    schema = check_roster(roster)
    if not net.binds(structure):
        raise ShapeMismatch("gate output does not match the circuit's slot counts")
    model = Ispn(structure, net, schema)
    regimes = []
    for ds in roster:
        model.register(ds.intervention)
        regimes.append(_Regime(ds, model))
    seed = cfg.seeds[0] if seed is None else seed
    rng = np.random.default_rng([seed, 2])
    opt = Adam(net.num_params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    log = TrainLog()
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        tot = np.zeros(len(regimes))
        cnt = np.zeros(len(regimes))
        for i, k, rows in _batches(regimes, cfg.batch_size, rng):
            r = regimes[i]
            x, w = r.batch(rows)
            loss, g = batch_step(structure, net, r.enc, x, w, model.discrete)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise NonFiniteLoss(f"epoch {epoch} regime {r.label} batch {k}", loss)
            # which regime's encoding actually reached the gate for these rows
            log.pairs[(r.label, model.regimes[_key(r.enc)])] += rows.size
            log.batch_losses.append(loss)
            tot[i] += -loss * rows.size
            cnt[i] += rows.size
            net.grad[:] = g
            opt.step(net.theta, g)
        now = time.perf_counter()
        wall = (now - start) * 1e3
        for r, t, c in zip(regimes, tot, cnt):
            log.records.append(EpochRecord(epoch, r.label, float(t / c + r.jac), wall))
        overall = float(tot.sum() / cnt.sum() + regimes[0].jac)
        log.records.append(EpochRecord(epoch, "all", overall, wall))
        log.elapsed_ms.append((now - t0) * 1e3)
        if progress:
            progress(epoch, overall)
    return net.theta.copy(), log, model


# -------------------------------------------------------------------- gradcheck


def composite_loss(structure: CircuitStructure, net: GateNetwork, enc, x, weights=None, discrete=None) -> float:
    x = np.atleast_2d(x)
    w = np.full(len(x), 1.0 / len(x)) if weights is None else np.asarray(weights)
    psi, _ = gate_forward(net, enc)
    return -float(np.dot(w, C.log_density(structure, psi, x, discrete=discrete)))


def gradcheck(
    structure: CircuitStructure,
    net: GateNetwork,
    x,
    enc=None,
    h: float = 1e-5,
    trainable: np.ndarray | None = None,
    corrupt: Callable[[np.ndarray], np.ndarray] | None = None,
    discrete=None,
) -> float:
    """Max relative error between the analytic end-to-end gradient of the mean
    negative log-likelihood and central differences, over coordinates with
    ``|analytic| > 1e-8``. ``corrupt`` post-processes the analytic gradient
    (negative controls); ``trainable`` restricts the checked coordinates."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    enc = np.zeros(net.input_dim) if enc is None else enc
    w = np.full(len(x), 1.0 / len(x))
    _, g = batch_step(structure, net, enc, x, w, discrete)
    if corrupt is not None:
        g = corrupt(g)
    idx = np.arange(net.num_params) if trainable is None else np.flatnonzero(trainable)
    worst = 0.0
    theta = net.theta
    for j in idx:
        if abs(g[j]) <= 1e-8:
            continue
        old = theta[j]
        theta[j] = old + h
        up = composite_loss(structure, net, enc, x, w, discrete)
        theta[j] = old - h
        dn = composite_loss(structure, net, enc, x, w, discrete)
        theta[j] = old
        num = (up - dn) / (2 * h)
        worst = max(worst, abs(g[j] - num) / max(abs(g[j]), abs(num)))
    return worst
