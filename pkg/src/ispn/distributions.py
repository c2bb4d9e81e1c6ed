"""Univariate distribution specs used for noise terms and interventions.

Every spec is an immutable value object that can draw samples from a numpy
``Generator`` and serialise itself to a plain dict. Finite-support families
additionally expose their atoms so the exact enumeration oracle can use them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import ClassVar

import numpy as np

from .errors import InvalidDistribution


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidDistribution(msg)


@dataclass(frozen=True)
class Distribution:
    family: ClassVar[str] = ""

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def support(self) -> list[tuple[float, float]] | None:
        """Atoms ``(value, probability)`` for finite families, else ``None``."""
        return None

    def to_dict(self) -> dict:
        return {"family": self.family, **asdict(self)}


@dataclass(frozen=True)
class Uniform(Distribution):
    a: float
    b: float
    family: ClassVar[str] = "uniform"

    def __post_init__(self):
        _require(self.a < self.b, f"uniform needs a < b, got ({self.a}, {self.b})")

    def sample(self, rng, n):
        return rng.uniform(self.a, self.b, size=n)


@dataclass(frozen=True)
class Bernoulli(Distribution):
    p: float
    family: ClassVar[str] = "bernoulli"

    def __post_init__(self):
        _require(0.0 <= self.p <= 1.0, f"bernoulli needs 0 <= p <= 1, got {self.p}")

    def sample(self, rng, n):
        return (rng.random(n) < self.p).astype(float)

    def support(self):
        return [(0.0, 1.0 - self.p), (1.0, self.p)]


@dataclass(frozen=True)
class Gaussian(Distribution):
    mu: float
    sigma: float
    family: ClassVar[str] = "gaussian"

    def __post_init__(self):
        _require(self.sigma > 0, f"gaussian needs sigma > 0, got {self.sigma}")

    def sample(self, rng, n):
        return rng.normal(self.mu, self.sigma, size=n)


@dataclass(frozen=True)
class Gamma(Distribution):
    """Gamma with shape ``p`` and scale ``q``."""

    p: float
    q: float
    family: ClassVar[str] = "gamma"

    def __post_init__(self):
        _require(self.p > 0 and self.q > 0, f"gamma needs shape, scale > 0, got ({self.p}, {self.q})")

    def sample(self, rng, n):
        return rng.gamma(self.p, self.q, size=n)


@dataclass(frozen=True)
class Beta(Distribution):
    """Beta(a, b) stretched to ``[l, k]`` via ``(k - l) * X + l``."""

    a: float
    b: float
    l: float = 0.0
    k: float = 1.0
    family: ClassVar[str] = "beta"

    def __post_init__(self):
        _require(self.a > 0 and self.b > 0, f"beta needs a, b > 0, got ({self.a}, {self.b})")
        _require(self.l < self.k, f"beta needs l < k, got ({self.l}, {self.k})")

    def sample(self, rng, n):
        return (self.k - self.l) * rng.beta(self.a, self.b, size=n) + self.l


@dataclass(frozen=True)
class Indicator(Distribution):
    """Equal mass on two points."""

    x1: float
    x2: float
    family: ClassVar[str] = "indicator"

    def __post_init__(self):
        _require(self.x1 != self.x2, "indicator needs two distinct points")

    def sample(self, rng, n):
        return np.where(rng.random(n) < 0.5, self.x1, self.x2).astype(float)

    def support(self):
        return [(float(self.x1), 0.5), (float(self.x2), 0.5)]


@dataclass(frozen=True)
class StudentT(Distribution):
    df: float
    scale: float = 1.0
    loc: float = 0.0
    family: ClassVar[str] = "student_t"

    def __post_init__(self):
        _require(self.df > 0 and self.scale > 0, "student_t needs df, scale > 0")

    def sample(self, rng, n):
        return self.loc + self.scale * rng.standard_t(self.df, size=n)


@dataclass(frozen=True)
class Gumbel(Distribution):
    loc: float
    scale: float
    family: ClassVar[str] = "gumbel"

    def __post_init__(self):
        _require(self.scale > 0, "gumbel needs scale > 0")

    def sample(self, rng, n):
        return rng.gumbel(self.loc, self.scale, size=n)


@dataclass(frozen=True)
class Laplace(Distribution):
    loc: float
    scale: float
    family: ClassVar[str] = "laplace"

    def __post_init__(self):
        _require(self.scale > 0, "laplace needs scale > 0")

    def sample(self, rng, n):
        return rng.laplace(self.loc, self.scale, size=n)


FAMILIES: dict[str, type[Distribution]] = {
    cls.family: cls
    for cls in (Uniform, Bernoulli, Gaussian, Gamma, Beta, Indicator, StudentT, Gumbel, Laplace)
}
# aliases accepted by the text formats
FAMILIES["normal"] = Gaussian
FAMILIES["t"] = StudentT


def from_dict(d: dict) -> Distribution:
    d = dict(d)
    family = d.pop("family")
    try:
        cls = FAMILIES[family]
    except KeyError:
        raise InvalidDistribution(f"unknown distribution family {family!r}") from None
    return cls(**d)


def make(family: str, args) -> Distribution:
    """Build a distribution from a family name and positional float args."""
    try:
        cls = FAMILIES[family]
    except KeyError:
        raise InvalidDistribution(f"unknown distribution family {family!r}") from None
    names = [f.name for f in fields(cls)]
    args = [float(a) for a in args]
    if not all(math.isfinite(a) for a in args):
        raise InvalidDistribution(f"{family} arguments must be finite")
    if len(args) > len(names):
        raise InvalidDistribution(f"{family} takes at most {len(names)} arguments, got {len(args)}")
    try:
        return cls(*args)
    except TypeError as exc:
        raise InvalidDistribution(f"bad arguments for {family}: {exc}") from None
