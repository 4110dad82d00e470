"""Synthetic typists with known timing distributions, for tests and demos."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import FeatureRow, FeatureTable, Source, digraph_label, split_digraph


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class Mixture:
    weights: tuple[float, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (len(self.weights) == len(self.means) == len(self.stds) >= 1):
            raise InvalidSpec("mixture fields must have equal, non-zero length")
        if any(w < 0 for w in self.weights) or not abs(sum(self.weights) - 1.0) < 1e-9:
            raise InvalidSpec("mixture weights must be non-negative and sum to 1")
        if any(m <= 0 for m in self.means) or any(s <= 0 for s in self.stds):
            raise InvalidSpec("mixture means and stds must be positive")

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    @property
    def variance(self) -> float:
        w, m, s = map(np.asarray, (self.weights, self.means, self.stds))
        return float(np.dot(w, s ** 2 + m ** 2) - self.mean ** 2)

    @classmethod
    def normal(cls, mean: float, std: float) -> "Mixture":
        return cls((1.0,), (mean,), (std,))

    @classmethod
    def from_obj(cls, obj) -> "Mixture":
        if isinstance(obj, Mapping):
            return cls(tuple(obj["weights"]), tuple(obj["means"]), tuple(obj["stds"]))
        raise InvalidSpec(f"cannot read mixture from {obj!r}")

    def to_obj(self) -> dict:
        return {"weights": list(self.weights), "means": list(self.means), "stds": list(self.stds)}


@dataclass(frozen=True)
class TypistSpec:
    """One synthetic user.

    ``hold`` maps digraph labels to their hold-time mixture; digraphs not
    listed use ``default_hold``.
    """

    subject: str
    count: int
    seed: int
    default_hold: Mixture
    hold: Mapping[str, Mixture] = field(default_factory=dict)
    ud_mean: float = 0.12
    ud_std: float = 0.04

    def __post_init__(self) -> None:
        if self.count < 1:
            raise InvalidSpec("count must be >= 1")
        if self.ud_mean <= 0 or self.ud_std <= 0:
            raise InvalidSpec("UD mean and std must be positive")

    def hold_for(self, digraph: str) -> Mixture:
        return self.hold.get(digraph, self.default_hold)


def _draw_positive(rng: np.random.Generator, mix: Mixture) -> float:
    while True:
        c = rng.choice(len(mix.weights), p=mix.weights) if len(mix.weights) > 1 else 0
        v = rng.normal(mix.means[c], mix.stds[c])
        if v > 0:
            return float(v)


def _draw_nonnegative(rng: np.random.Generator, mean: float, std: float) -> float:
    while True:
        v = rng.normal(mean, std)
        if v >= 0:
            return float(v)


def generate(specs: Sequence[TypistSpec], vocabulary: Sequence[str], chain: bool = True) -> FeatureTable:
    """Draw ``count`` rows per typist.

    Digraphs are uniform over the vocabulary. With ``chain`` each next digraph
    is drawn uniformly among those starting with the previous second key (when
    any exist), so consecutive rows form real keystroke sequences; over a
    vocabulary of all ordered pairs the marginal stays uniform.
    """
    if not vocabulary:
        raise InvalidSpec("vocabulary must be non-empty")
    vocab = list(vocabulary)
    by_first: dict[str, list[str]] = {}
    for d in vocab:
        by_first.setdefault(split_digraph(d)[0], []).append(d)

    rows = []
    for spec in specs:
        rng = np.random.default_rng(spec.seed)
        prev = None
        for _ in range(spec.count):
            pool = by_first.get(split_digraph(prev)[1]) if (chain and prev) else None
            pool = pool or vocab
            digraph = pool[int(rng.integers(len(pool)))]
            h = _draw_positive(rng, spec.hold_for(digraph))
            ud = _draw_nonnegative(rng, spec.ud_mean, spec.ud_std)
            rows.append(FeatureRow(spec.subject, digraph, h, ud, h + ud))
            prev = digraph
    return FeatureTable(tuple(rows), Source.SYNTHETIC)


def all_pairs(alphabet: str) -> list[str]:
    return [digraph_label(a, b) for a in alphabet for b in alphabet]


def random_typist(subject: str, vocabulary: Sequence[str], hold_range: tuple[float, float],
                  count: int, seed: int, hold_std: float = 0.005,
                  ud_mean: float = 0.12, ud_std: float = 0.04) -> TypistSpec:
    """A typist whose per-digraph mean hold times are spread over ``hold_range``."""
    rng = np.random.default_rng([seed, 7])
    lo, hi = hold_range
    hold = {d: Mixture.normal(float(rng.uniform(lo, hi)), hold_std) for d in vocabulary}
    default = Mixture.normal((lo + hi) / 2, hold_std)
    return TypistSpec(subject, count, seed, default, hold, ud_mean, ud_std)


# -- spec files --------------------------------------------------------------


def load_spec_file(path: str | Path) -> tuple[list[TypistSpec], list[str]]:
    """Read a JSON spec file.

    Layout::

        {"vocabulary": ["a→b", ...]  or  "alphabet": "etaoin",
         "chain": true,
         "typists": [{"subject": "u1", "count": 500, "seed": 1,
                      "ud_mean": 0.12, "ud_std": 0.04,
                      "default_hold": {"weights": [1], "means": [0.09], "stds": [0.01]},
                      "hold": {"a→b": {...}},
                      "hold_range": [0.05, 0.08], "hold_std": 0.005}]}

    A typist with ``hold_range`` gets per-digraph means drawn from that range
    (see ``random_typist``) instead of explicit mixtures.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if "vocabulary" in data:
        vocab = list(data["vocabulary"])
    elif "alphabet" in data:
        vocab = all_pairs(data["alphabet"])
    else:
        raise InvalidSpec("spec file needs 'vocabulary' or 'alphabet'")
    specs = []
    for t in data.get("typists", []):
        try:
            if "hold_range" in t:
                specs.append(random_typist(
                    t["subject"], vocab, tuple(t["hold_range"]), int(t["count"]), int(t["seed"]),
                    float(t.get("hold_std", 0.005)), float(t.get("ud_mean", 0.12)),
                    float(t.get("ud_std", 0.04)),
                ))
            else:
                specs.append(TypistSpec(
                    subject=t["subject"],
                    count=int(t["count"]),
                    seed=int(t["seed"]),
                    default_hold=Mixture.from_obj(t["default_hold"]),
                    hold={k: Mixture.from_obj(v) for k, v in t.get("hold", {}).items()},
                    ud_mean=float(t.get("ud_mean", 0.12)),
                    ud_std=float(t.get("ud_std", 0.04)),
                ))
        except KeyError as exc:
            raise InvalidSpec(f"typist entry missing {exc}") from None
    if not specs:
        raise InvalidSpec("spec file lists no typists")
    return specs, vocab


def generate_from_file(path: str | Path) -> FeatureTable:
    specs, vocab = load_spec_file(path)
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return generate(specs, vocab, chain=bool(data.get("chain", True)))
