"""Gate network: a small ReLU MLP mapping a regime encoding to circuit parameters.

The encoding of a regime is the mutilated adjacency matrix flattened
row-major, followed by a 0/1 mask of intervened variables and a channel
holding each atomic intervention value rescaled to [0, 1] by its domain
(0 for distributional interventions). Its length is ``N**2 + 2 N``.

The network stores all weights and biases in one flat vector ``theta``;
layer ``k`` is a weight block of shape ``(out, in)`` in row-major order
followed by its bias. Gradients are accumulated into ``grad`` with the same
layout.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .circuit import CircuitStructure, ParameterVector
from .errors import HashMismatch, MissingCache, ShapeMismatch
from .scm import Atomic, CausalGraph, Domain, Intervention

CHECKPOINT_MAGIC = b"ISPNGATE"
CHECKPOINT_VERSION = 1


def encoding_dim(n: int) -> int:
    return n * n + 2 * n


def encode_regime(graph: CausalGraph, intervention: Intervention, domains) -> np.ndarray:
    """Gate input for ``intervention`` given the graph it mutilated."""
    n = graph.n
    if len(domains) != n:
        raise ShapeMismatch(f"need {n} domains, got {len(domains)}")
    mask = np.zeros(n)
    value = np.zeros(n)
    adj = graph.adj.astype(float)
    for name, mech in intervention.targets:
        i = graph.index(name)
        adj[:, i] = 0.0
        mask[i] = 1.0
        if isinstance(mech, Atomic):
            dom: Domain = domains[i]
            value[i] = (mech.value - dom.lo) / dom.width
    return np.concatenate([adj.ravel(), mask, value])


@dataclass
class GateCache:
    """Activations from one forward pass: the input and every layer output
    before its nonlinearity."""

    dims: tuple[int, ...]
    inputs: np.ndarray
    pre: list[np.ndarray]


@dataclass
class GateNetwork:
    dims: tuple[int, ...]
    num_sum_weights: int
    theta: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ShapeMismatch(f"bad layer dims {self.dims}")
        if not 0 <= self.num_sum_weights <= self.dims[-1]:
            raise ShapeMismatch("num_sum_weights exceeds the output dimension")
        self.theta = np.array(self.theta, dtype=float).ravel()
        if self.theta.size != num_gate_params(self.dims):
            raise ShapeMismatch(f"theta has {self.theta.size} entries, dims {self.dims} need {num_gate_params(self.dims)}")
        if not np.all(np.isfinite(self.theta)):
            raise ShapeMismatch("gate parameters must be finite")
        if self.grad is None:
            self.grad = np.zeros_like(self.theta)

    @classmethod
    def create(
        cls,
        structure: CircuitStructure,
        hidden: tuple[int, ...] = (10, 10),
        rng: np.random.Generator | None = None,
        input_dim: int | None = None,
    ) -> GateNetwork:
        """Glorot-uniform weights and zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        n_in = encoding_dim(structure.num_vars) if input_dim is None else input_dim
        dims = (n_in, *hidden, structure.num_sum_weights + structure.num_leaf_params)
        parts = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-lim, lim, size=fan_out * fan_in))
            parts.append(np.zeros(fan_out))
        return cls(dims, structure.num_sum_weights, np.concatenate(parts))

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    @property
    def num_params(self) -> int:
        return self.theta.size

    def layers(self, flat: np.ndarray | None = None):
        """Views ``(W, b)`` into ``flat`` (default ``theta``)."""
        flat = self.theta if flat is None else flat
        out, off = [], 0
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            W = flat[off : off + fan_in * fan_out].reshape(fan_out, fan_in)
            off += fan_in * fan_out
            b = flat[off : off + fan_out]
            off += fan_out
            out.append((W, b))
        return out

    def copy(self) -> GateNetwork:
        return GateNetwork(self.dims, self.num_sum_weights, self.theta.copy())

    def binds(self, structure: CircuitStructure) -> bool:
        return (
            self.output_dim == structure.num_sum_weights + structure.num_leaf_params
            and self.num_sum_weights == structure.num_sum_weights
        )

    def zero_grad(self) -> None:
        self.grad[:] = 0.0


def num_gate_params(dims) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def _as_input(net: GateNetwork, enc) -> np.ndarray:
    if isinstance(enc, CausalGraph):
        flat = enc.adj.astype(float).ravel()
        # a bare graph carries no intervention channels
        enc = np.concatenate([flat, np.zeros(2 * enc.n)]) if net.input_dim == encoding_dim(enc.n) else flat
    x = np.asarray(enc, dtype=float).ravel()
    if x.size != net.input_dim:
        raise ShapeMismatch(f"gate expects {net.input_dim} inputs, got {x.size}")
    return x


def gate_forward(net: GateNetwork, enc) -> tuple[ParameterVector, GateCache]:
    """``psi = f(enc; theta)``. ``enc`` is a regime encoding or, for a net
    whose input is only the adjacency, a :class:`CausalGraph`."""
    h = _as_input(net, enc)
    x = h
    pre = []
    layers = net.layers()
    for k, (W, b) in enumerate(layers):
        z = W @ h + b
        pre.append(z)
        h = np.maximum(z, 0.0) if k < len(layers) - 1 else z
    psi = ParameterVector(h[: net.num_sum_weights].copy(), h[net.num_sum_weights :].copy())
    return psi, GateCache(net.dims, x, pre)


def gate_backward(net: GateNetwork, cache: GateCache | None, dpsi, accumulate: bool = True) -> np.ndarray:
    """Reverse pass; returns ``dL/dtheta`` and, if ``accumulate``, adds it to
    ``net.grad``. ReLU has subgradient 0 at 0."""
    if cache is None or not isinstance(cache, GateCache) or cache.dims != net.dims or len(cache.pre) != len(net.dims) - 1:
        raise MissingCache("gate_backward needs the cache from a forward pass of this network")
    g = dpsi.flat() if isinstance(dpsi, ParameterVector) else np.asarray(dpsi, dtype=float).ravel()
    if g.size != net.output_dim:
        raise ShapeMismatch(f"dL/dpsi has {g.size} entries, expected {net.output_dim}")
    out = np.zeros_like(net.theta)
    glayers = net.layers(out)
    layers = net.layers()
    for k in range(len(layers) - 1, -1, -1):
        h_in = cache.inputs if k == 0 else np.maximum(cache.pre[k - 1], 0.0)
        dW, db = glayers[k]
        dW[:] = np.outer(g, h_in)
        db[:] = g
        if k:
            g = (layers[k][0].T @ g) * (cache.pre[k - 1] > 0.0)
    if accumulate:
        net.grad += out
    return out


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(path, net: GateNetwork, structure: CircuitStructure, extra: dict | None = None) -> Path:
    """Magic, little-endian uint64 header length, UTF-8 JSON header, then
    ``theta`` as little-endian float64."""
    if not net.binds(structure):
        raise ShapeMismatch("network output does not match the structure's slot counts")
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": list(net.dims),
        "input_dim": net.input_dim,
        "output_dim": net.output_dim,
        "num_sum_weights": net.num_sum_weights,
        "structure_hash": structure.hash,
    }
    header.update(extra or {})
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(net.theta.astype("<f8").tobytes())
    return path


def read_checkpoint_header(path) -> dict:
    with Path(path).open("rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ShapeMismatch("not a gate checkpoint")
    (size,) = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(size).decode())


def load_checkpoint(path, structure: CircuitStructure | None = None) -> tuple[GateNetwork, dict]:
    """Read a checkpoint; with ``structure`` given, its hash must match."""
    with Path(path).open("rb") as fh:
        header = _read_header(fh)
        payload = fh.read()
    if structure is not None and header["structure_hash"] != structure.hash:
        raise HashMismatch(f"checkpoint {path} was trained for structure {header['structure_hash'][:12]}, got {structure.hash[:12]}")
    theta = np.frombuffer(payload, dtype="<f8").astype(float)
    net = GateNetwork(tuple(header["dims"]), header["num_sum_weights"], theta)
    if structure is not None and not net.binds(structure):
        raise ShapeMismatch("checkpoint dimensions do not match the structure")
    return net, header
