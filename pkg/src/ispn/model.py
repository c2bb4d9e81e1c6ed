"""The composite model: a gate network feeding a fixed circuit structure.

Continuous columns are standardised by their domain before they reach the
circuit (centre at the midpoint, divide by a quarter of the width); binary
columns pass through unchanged. Densities reported in data units include the
change-of-variables term.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import circuit as C
from .circuit import CircuitStructure, ParameterVector
from .errors import SchemaMismatch, ShapeMismatch, UnknownRegime, UnknownVariable
from .gate import GateNetwork, encode_regime, gate_forward, load_checkpoint, save_checkpoint
from .scm import CausalGraph, Domain, Intervention, Scm


@dataclass(frozen=True)
class Normalizer:
    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def for_domains(cls, domains) -> Normalizer:
        shift = np.array([0.0 if d.is_binary else 0.5 * (d.lo + d.hi) for d in domains])
        scale = np.array([1.0 if d.is_binary else 0.25 * d.width for d in domains])
        return cls(shift, scale)

    def forward(self, x):
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.shift

    def log_jacobian(self, marginalized=None) -> float | np.ndarray:
        """``log |dz/dx|`` summed over observed variables."""
        per = -np.log(self.scale)
        if marginalized is None:
            return float(per.sum())
        return np.where(np.asarray(marginalized, dtype=bool), 0.0, per).sum(axis=-1)


@dataclass(frozen=True)
class Schema:
    """Variable names, domains, and the unintervened causal graph."""

    graph: CausalGraph
    domains: tuple[Domain, ...]

    @property
    def names(self):
        return self.graph.names

    @classmethod
    def of(cls, scm: Scm) -> Schema:
        base = scm.graph
        if not scm.intervention.is_empty:
            raise SchemaMismatch("schema must come from the unintervened SCM")
        return cls(base, tuple(scm.domains))

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "graph": self.graph.adj.astype(int).tolist(),
            "domains": [[d.kind, d.lo, d.hi] for d in self.domains],
        }

    @classmethod
    def from_dict(cls, d) -> Schema:
        return cls(CausalGraph(d["names"], d["graph"]), tuple(Domain(k, lo, hi) for k, lo, hi in d["domains"]))

    def index(self, name: str) -> int:
        return self.graph.index(name)


def _key(enc: np.ndarray) -> bytes:
    return np.ascontiguousarray(enc, dtype="<f8").tobytes()


@dataclass
class Ispn:
    structure: CircuitStructure
    net: GateNetwork
    schema: Schema
    regimes: dict[bytes, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.net.binds(self.structure):
            raise ShapeMismatch("gate output does not match the circuit's slot counts")
        if self.structure.num_vars != len(self.schema.names):
            raise ShapeMismatch("circuit and schema disagree on the variable count")
        self.norm = Normalizer.for_domains(self.schema.domains)
        self.discrete = np.array([d.is_binary for d in self.schema.domains])

    # regimes --------------------------------------------------------------------

    def encode(self, iv: Intervention) -> np.ndarray:
        for name, _ in iv.targets:
            if name not in self.schema.names:
                raise UnknownVariable(name)
        return encode_regime(self.schema.graph, iv, self.schema.domains)

    def register(self, iv: Intervention) -> None:
        self.regimes[_key(self.encode(iv))] = iv.label

    def knows(self, iv: Intervention) -> bool:
        return _key(self.encode(iv)) in self.regimes

    def params(self, iv: Intervention, strict: bool = True) -> ParameterVector:
        enc = self.encode(iv)
        if strict and _key(enc) not in self.regimes:
            raise UnknownRegime(f"regime {iv.label!r} was not part of training")
        return gate_forward(self.net, enc)[0]

    # queries --------------------------------------------------------------------

    def log_density(self, x, iv: Intervention, marginalized=None, strict: bool = True):
        """Log-likelihood in data units: density for continuous columns,
        cell probability for binary ones."""
        psi = self.params(iv, strict)
        z = self.norm.forward(x)
        lp = C.log_density(self.structure, psi, z, marginalized, discrete=self.discrete)
        marg = None if marginalized is None else np.broadcast_to(marginalized, np.shape(z))
        return lp + self.norm.log_jacobian(marg)

    def interval_masses(self, iv: Intervention, variable: str, edges, strict: bool = True) -> np.ndarray:
        i = self.schema.index(variable)
        psi = self.params(iv, strict)
        z = (np.asarray(edges, dtype=float) - self.norm.shift[i]) / self.norm.scale[i]
        return C.interval_masses(self.structure, psi, i, z)

    def binary_masses(self, iv: Intervention, variable: str, strict: bool = True) -> np.ndarray:
        return self.interval_masses(iv, variable, [-np.inf, 0.5, np.inf], strict)

    def density_curve(self, iv: Intervention, variable: str, grid, strict: bool = True) -> np.ndarray:
        i = self.schema.index(variable)
        psi = self.params(iv, strict)
        z = (np.asarray(grid, dtype=float) - self.norm.shift[i]) / self.norm.scale[i]
        return C.marginal_curve(self.structure, psi, i, z) / self.norm.scale[i]

    # persistence ----------------------------------------------------------------

    def header(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "regimes": sorted(self.regimes.values()),
            "regime_keys": {v: k.hex() for k, v in sorted(self.regimes.items(), key=lambda kv: kv[1])},
        }

    def save(self, path, extra: dict | None = None) -> Path:
        return save_checkpoint(path, self.net, self.structure, {**self.header(), **(extra or {})})

    @classmethod
    def load(cls, path, structure: CircuitStructure) -> Ispn:
        net, header = load_checkpoint(path, structure)
        regimes = {bytes.fromhex(k): label for label, k in header["regime_keys"].items()}
        return cls(structure, net, Schema.from_dict(header["schema"]), regimes)


def save_structure(path, structure: CircuitStructure) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(structure.to_json() + "\n")
    return path


def load_structure(path) -> CircuitStructure:
    return CircuitStructure.from_json(Path(path).read_text())

