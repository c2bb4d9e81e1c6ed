"""Dataset profiles, roster sampling, and cached model fitting."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .circuit import CircuitStructure, RatConfig, build_rat, rat_config_for, rat_slot_counts
from .errors import UnknownDataset
from .model import Ispn
from .scm import Dataset, Intervention, Scm, apply_intervention, sample, uniform_roster
from .specfile import BUILTIN, load_builtin
from .trainer import EpochRecord, TrainConfig, TrainLog, init_gate, train


@dataclass(frozen=True)
class Profile:
    """Default experiment settings for one built-in dataset."""

    name: str
    n: int  # rows per regime
    epochs: int
    batch_size: int
    sum_weights: int
    leaf_params: int
    capacity_sizes: tuple[int, ...]


_DISCRETE_SIZES = (600, 1200, 1800, 2400, 3200)
PROFILES = {
    "asia": Profile("asia", 10_000, 20, 100, 2400, 96, _DISCRETE_SIZES),
    "earthquake": Profile("earthquake", 10_000, 20, 100, 2400, 96, _DISCRETE_SIZES),
    "cancer": Profile("cancer", 10_000, 20, 100, 2400, 96, _DISCRETE_SIZES),
    "health": Profile("health", 100_000, 130, 1000, 600, 12, (300, 600, 1000, 1500, 2000)),
}


def profile(name: str) -> Profile:
    if name not in PROFILES:
        raise UnknownDataset(name)
    return PROFILES[name]


def regime_seed(seed: int, k: int) -> int:
    """Data seed of the ``k``-th regime in a roster drawn for ensemble ``seed``."""
    return int(np.random.SeedSequence([seed, k, 7]).generate_state(1)[0])


def make_roster(scm: Scm, regimes, n: int, seed: int) -> list[Dataset]:
    return [sample(apply_intervention(scm, iv), n, regime_seed(seed, k)) for k, iv in enumerate(regimes)]


def rat_config(prof: Profile, num_vars: int, sum_weights: int | None = None) -> RatConfig:
    """The profile's structure, or for another capacity the same structure
    with only the sums per region changed to come closest to ``sum_weights``.

    Holding depth, repetitions and leaves fixed keeps a capacity sweep to one
    knob; a free search would change the circuit's shape between sizes."""
    base = rat_config_for(num_vars, prof.sum_weights, prof.leaf_params)
    if sum_weights is None or sum_weights == prof.sum_weights:
        return base
    best = None
    for s in range(1, 4 * max(base.sums_per_region, 8)):
        cfg = replace(base, sums_per_region=s)
        err = abs(rat_slot_counts(cfg)[0] - sum_weights)
        if best is None or err < best[0]:
            best = (err, cfg)
    return best[1]


@dataclass
class Fit:
    model: Ispn
    log: TrainLog
    structure: CircuitStructure
    seed: int
    key: str


# bump when training semantics change so stale on-disk fits are not reused
FIT_VERSION = 2


def fit_key(dataset: str, regimes, n: int, cfg: TrainConfig, rat: RatConfig, seed: int) -> str:
    blob = {
        "version": FIT_VERSION,
        "dataset": dataset,
        "regimes": [iv.label for iv in regimes],
        "n": n,
        "train": {k: v for k, v in cfg.to_dict().items() if k not in ("seeds", "roster")},
        "rat": asdict(rat),
        "seed": seed,
    }
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


def fit(
    dataset: str,
    seed: int,
    regimes: list[Intervention] | None = None,
    n: int | None = None,
    cfg: TrainConfig | None = None,
    rat: RatConfig | None = None,
    cache_dir: Path | str | None = None,
    scm: Scm | None = None,
) -> Fit:
    """Sample a roster, train one model, and optionally cache it on disk.

    Cached fits are keyed by every setting that influences the result."""
    scm = load_builtin(dataset) if scm is None else scm
    prof = PROFILES.get(dataset)
    regimes = uniform_roster(scm) if regimes is None else list(regimes)
    n = prof.n if n is None else n
    cfg = cfg or TrainConfig(epochs=prof.epochs, batch_size=prof.batch_size)
    rat = rat or rat_config(prof, scm.n)
    key = fit_key(dataset, regimes, n, cfg, rat, seed)
    structure = build_rat(rat)
    if cache_dir is not None:
        d = Path(cache_dir) / key
        if (d / "model.ckpt").exists():
            model = Ispn.load(d / "model.ckpt", structure)
            return Fit(model, read_log(d / "log.json"), structure, seed, key)
    roster = make_roster(scm, regimes, n, seed)
    net = init_gate(structure, cfg.hidden, seed)
    _, log, model = train(replace(cfg, seeds=(seed,)), structure, net, roster, seed=seed)
    if cache_dir is not None:
        d.mkdir(parents=True, exist_ok=True)
        model.save(d / "model.ckpt", {"fit_key": key})
        write_log(d / "log.json", log)
    return Fit(model, log, structure, seed, key)


def write_log(path, log: TrainLog) -> None:
    Path(path).write_text(
        json.dumps(
            {
                "records": [asdict(r) for r in log.records],
                "elapsed_ms": log.elapsed_ms,
                "pairs": [[a, b, c] for (a, b), c in sorted(log.pairs.items())],
            }
        )
    )


def read_log(path) -> TrainLog:
    d = json.loads(Path(path).read_text())
    log = TrainLog([EpochRecord(**r) for r in d["records"]], elapsed_ms=d["elapsed_ms"])
    for a, b, c in d["pairs"]:
        log.pairs[(a, b)] = c
    return log


__all__ = ["BUILTIN", "PROFILES", "Fit", "Profile", "fit", "make_roster", "profile", "rat_config", "regime_seed"]
