"""Gunetti-Picardi free-text distances.

Samples are reduced to n-graph duration tables (n = 2, 3, 4). Two samples are
compared with the relative measure R (how much the speed ranking of their
shared n-graphs is shuffled) and the absolute measure A (what fraction of
shared n-graphs have clearly different durations). A probe is attributed to
the enrolled user whose samples are closest on average.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Iterable, Mapping, Sequence

from .core import FeatureRow, split_digraph

NGraph = tuple[str, ...]
ORDERS = (2, 3, 4)
DEFAULT_T = 1.25
DEFAULT_RESCUE = 1.1


class TooShort(ValueError):
    pass


class EmptyShared(ValueError):
    pass


class EmptyGallery(ValueError):
    pass


class UnknownSubject(KeyError):
    pass


@dataclass(frozen=True)
class NGraphTable:
    n: int
    durations: Mapping[NGraph, float]
    counts: Mapping[NGraph, int]

    def __len__(self) -> int:
        return len(self.durations)


def keystroke_runs(rows: Sequence[FeatureRow]) -> list[tuple[list[str], list[float]]]:
    """Split rows into unbroken keystroke chains.

    Row i and row i+1 belong to the same chain when the second key of row i
    is the first key of row i+1; a filtered row between them breaks the chain.
    Each chain is (keys, down-down gaps) with len(keys) == len(gaps) + 1.
    """
    runs: list[tuple[list[str], list[float]]] = []
    keys: list[str] = []
    gaps: list[float] = []
    for row in rows:
        first, second = split_digraph(row.key)
        if keys and keys[-1] == first:
            keys.append(second)
            gaps.append(row.DD)
        else:
            if gaps:
                runs.append((keys, gaps))
            keys, gaps = [first, second], [row.DD]
    if gaps:
        runs.append((keys, gaps))
    return runs


def extract_ngraphs(rows: Sequence[FeatureRow], n: int) -> NGraphTable:
    """Mean first-press to last-press time of every n-graph in ``rows``."""
    if n < 2:
        raise ValueError("n must be >= 2")
    sums: dict[NGraph, list[float]] = {}
    for keys, gaps in keystroke_runs(rows):
        for i in range(len(keys) - n + 1):
            sums.setdefault(tuple(keys[i:i + n]), []).append(math.fsum(gaps[i:i + n - 1]))
    if not sums:
        raise TooShort(f"no run of {n} consecutive keystrokes")
    durations = {g: math.fsum(v) / len(v) for g, v in sums.items()}
    counts = {g: len(v) for g, v in sums.items()}
    return NGraphTable(n, durations, counts)


@dataclass(frozen=True, eq=False)
class GpSample:
    """n-graph tables of one typing sample. Hashes by identity."""

    subject: str
    ordinal: int
    tables: Mapping[int, NGraphTable]

    def table(self, n: int) -> NGraphTable:
        t = self.tables.get(n)
        return t if t is not None else NGraphTable(n, {}, {})


def build_sample(rows: Sequence[FeatureRow], ordinal: int = 0, orders: Iterable[int] = ORDERS) -> GpSample:
    subject = rows[0].subject if rows else ""
    tables = {}
    for n in orders:
        try:
            tables[n] = extract_ngraphs(rows, n)
        except TooShort:
            tables[n] = NGraphTable(n, {}, {})
    return GpSample(subject, ordinal, tables)


def max_disorder(v: int) -> int:
    return v * v // 2 if v % 2 == 0 else (v * v - 1) // 2


def degree_of_disorder(order1: Sequence, order2: Sequence) -> float:
    """Normalised sum of position displacements between two orderings."""
    v = len(order1)
    if v == 0:
        raise EmptyShared("nothing to order")
    pos2 = {item: i for i, item in enumerate(order2)}
    if len(order2) != v or len(pos2) != v or any(item not in pos2 for item in order1):
        raise ValueError("orderings must be permutations of the same items")
    if v == 1:
        return 0.0
    total = sum(abs(i - pos2[item]) for i, item in enumerate(order1))
    return total / max_disorder(v)


def _shared(p: GpSample, q: GpSample, n: int) -> tuple[Mapping, Mapping, set[NGraph]]:
    dp, dq = p.table(n).durations, q.table(n).durations
    # set order is arbitrary; callers sort or count, so it never leaks out
    return dp, dq, dp.keys() & dq.keys()


def r_distance(p: GpSample, q: GpSample, n: int) -> float:
    """Rank disorder of the n-graphs both samples contain; 1.0 with no overlap."""
    dp, dq, shared = _shared(p, q, n)
    if not shared:
        return 1.0
    # equal durations fall back to tuple order so the ranking is deterministic
    order_p = sorted(shared, key=lambda g: (dp[g], g))
    order_q = sorted(shared, key=lambda g: (dq[g], g))
    return degree_of_disorder(order_p, order_q)


def a_distance(p: GpSample, q: GpSample, n: int, t: float = DEFAULT_T) -> float:
    """One minus the share of common n-graphs whose duration ratio is within ``t``."""
    if not t > 1:
        raise ValueError("t must be > 1")
    dp, dq, shared = _shared(p, q, n)
    if not shared:
        return 1.0
    similar = sum(1 for g in shared if max(dp[g], dq[g]) / min(dp[g], dq[g]) <= t)
    return 1.0 - similar / len(shared)


def shared_count(p: GpSample, q: GpSample, n: int) -> int:
    return len(_shared(p, q, n)[2])


_SPEC_RE = re.compile(r"^(?:R(\d+))?(?:A(\d+))?$")


@dataclass(frozen=True)
class MeasureSpec:
    """Which R and A terms to average, e.g. R23A23 = mean(R2, R3, A2, A3)."""

    r_orders: frozenset[int] = frozenset()
    a_orders: frozenset[int] = frozenset()
    t: float = DEFAULT_T

    def __post_init__(self) -> None:
        object.__setattr__(self, "r_orders", frozenset(self.r_orders))
        object.__setattr__(self, "a_orders", frozenset(self.a_orders))
        if not (self.r_orders or self.a_orders):
            raise ValueError("a measure needs at least one R or A term")
        if not self.t > 1:
            raise ValueError("t must be > 1")
        if any(n < 2 for n in self.r_orders | self.a_orders):
            raise ValueError("n-graph orders start at 2")

    @property
    def name(self) -> str:
        r = "R" + "".join(map(str, sorted(self.r_orders))) if self.r_orders else ""
        a = "A" + "".join(map(str, sorted(self.a_orders))) if self.a_orders else ""
        return r + a

    @property
    def key(self) -> str:
        return f"{self.name}@t={self.t:g}"

    @property
    def orders(self) -> frozenset[int]:
        return self.r_orders | self.a_orders

    @classmethod
    def parse(cls, text: str, t: float = DEFAULT_T) -> "MeasureSpec":
        m = _SPEC_RE.match(text.strip().upper())
        if not m or not (m.group(1) or m.group(2)):
            raise ValueError(f"bad measure name {text!r}")
        r = frozenset(int(c) for c in m.group(1) or "")
        a = frozenset(int(c) for c in m.group(2) or "")
        return cls(r, a, t)

    def with_t(self, t: float) -> "MeasureSpec":
        return MeasureSpec(self.r_orders, self.a_orders, t)


TABLE1_MEASURES = ("A2", "A3", "A23", "R2", "R23", "R2A2", "R2A234", "R23A23", "R234A23")


class DistanceCache:
    """Memoises R and A terms per sample pair; samples hash by identity."""

    def __init__(self):
        self._terms: dict[tuple, float] = {}

    def r(self, p: GpSample, q: GpSample, n: int) -> float:
        key = (p, q, "R", n) if id(p) <= id(q) else (q, p, "R", n)
        val = self._terms.get(key)
        if val is None:
            val = self._terms[key] = r_distance(p, q, n)
        return val

    def a(self, p: GpSample, q: GpSample, n: int, t: float) -> float:
        key = (p, q, "A", n, t) if id(p) <= id(q) else (q, p, "A", n, t)
        val = self._terms.get(key)
        if val is None:
            val = self._terms[key] = a_distance(p, q, n, t)
        return val


def combined_distance(p: GpSample, q: GpSample, spec: MeasureSpec, cache: DistanceCache | None = None) -> float:
    """Equal-weight mean of the spec's R and A terms."""
    terms = []
    for n in sorted(spec.r_orders):
        terms.append(cache.r(p, q, n) if cache else r_distance(p, q, n))
    for n in sorted(spec.a_orders):
        terms.append(cache.a(p, q, n, spec.t) if cache else a_distance(p, q, n, spec.t))
    return math.fsum(terms) / len(terms)


def low_overlap(p: GpSample, q: GpSample, spec: MeasureSpec) -> bool:
    """True when some term of ``spec`` had no shared n-graphs to work with."""
    return any(shared_count(p, q, n) == 0 for n in spec.orders)


@dataclass(frozen=True)
class GpProfile:
    subject: str
    samples: tuple[GpSample, ...]
    mean_self_distance: dict[str, float] = field(default_factory=dict)

    def self_distance(self, spec: MeasureSpec, cache: DistanceCache | None = None) -> float:
        val = self.mean_self_distance.get(spec.key)
        if val is None:
            val = _mean_self_distance(self.samples, spec, cache)
            self.mean_self_distance[spec.key] = val
        return val


def _mean_self_distance(samples: Sequence[GpSample], spec: MeasureSpec, cache: DistanceCache | None) -> float:
    pairs = [combined_distance(a, b, spec, cache) for a, b in combinations(samples, 2)]
    return math.fsum(pairs) / len(pairs)


def enroll(subject: str, samples: Sequence[GpSample], specs: Iterable[MeasureSpec] = (),
           cache: DistanceCache | None = None) -> GpProfile:
    if len(samples) < 2:
        raise ValueError(f"{subject}: enrolment needs at least 2 samples, got {len(samples)}")
    msd = {spec.key: _mean_self_distance(samples, spec, cache) for spec in specs}
    return GpProfile(subject, tuple(samples), msd)


def md(profile: GpProfile, probe: GpSample, spec: MeasureSpec, cache: DistanceCache | None = None) -> float:
    """Mean combined distance from the probe to each enrolled sample of a user."""
    ds = [combined_distance(probe, s, spec, cache) for s in profile.samples]
    return math.fsum(ds) / len(ds)


@dataclass(frozen=True)
class Classification:
    best_subject: str
    md_best: float
    runner_up_md: float
    distances: dict[str, float]


def rank_distances(distances: Mapping[str, float]) -> Classification:
    if not distances:
        raise EmptyGallery("gallery is empty")
    ranked = sorted(distances.items(), key=lambda kv: (kv[1], kv[0]))
    best, md_best = ranked[0]
    runner = ranked[1][1] if len(ranked) > 1 else math.inf
    return Classification(best, md_best, runner, dict(distances))


def classify(probe: GpSample, gallery: Sequence[GpProfile], spec: MeasureSpec,
             cache: DistanceCache | None = None) -> Classification:
    if not gallery:
        raise EmptyGallery("gallery is empty")
    return rank_distances({p.subject: md(p, probe, spec, cache) for p in gallery})


class Reason(str, Enum):
    NOT_CLOSEST = "NotClosest"
    ABOVE_SELF_THRESHOLD = "AboveSelfThreshold"


@dataclass(frozen=True)
class Decision:
    accepted: bool
    reason: Reason | None = None

    def __bool__(self) -> bool:
        return self.accepted


def decide(ranking: Classification, claimed: str, self_distance: float,
           k: float = 1.0, rescue: float = DEFAULT_RESCUE) -> Decision:
    """Threshold rule plus the near-miss rescue for a claimed identity.

    The claim passes when the claimed user is nearest and their mean distance
    is under k times their own mean self-distance. When someone else is
    nearest, the claim is still accepted if it is under that threshold and
    within ``rescue`` times the winner's distance.
    """
    md_claimed = ranking.distances[claimed]
    under = md_claimed < k * self_distance
    if ranking.best_subject == claimed:
        return Decision(True) if under else Decision(False, Reason.ABOVE_SELF_THRESHOLD)
    if under and md_claimed < rescue * ranking.md_best:
        return Decision(True)
    return Decision(False, Reason.NOT_CLOSEST)


def critical_k(ranking: Classification, claimed: str, self_distance: float,
               rescue: float = DEFAULT_RESCUE) -> float:
    """Smallest k above which ``decide`` accepts; inf when no k does."""
    md_claimed = ranking.distances[claimed]
    if ranking.best_subject != claimed and not md_claimed < rescue * ranking.md_best:
        return math.inf
    if self_distance <= 0:
        return math.inf
    return md_claimed / self_distance


def authenticate(probe: GpSample, claimed: str, gallery: Sequence[GpProfile], spec: MeasureSpec,
                 k: float = 1.0, rescue: float = DEFAULT_RESCUE,
                 cache: DistanceCache | None = None) -> Decision:
    if not k > 0:
        raise ValueError("k must be > 0")
    by_subject = {p.subject: p for p in gallery}
    if claimed not in by_subject:
        raise UnknownSubject(claimed)
    ranking = classify(probe, gallery, spec, cache)
    return decide(ranking, claimed, by_subject[claimed].self_distance(spec, cache), k, rescue)


# -- persistence -------------------------------------------------------------


def sample_to_record(sample: GpSample) -> dict:
    return {
        "ordinal": sample.ordinal,
        "tables": {
            str(n): [[list(g), t.durations[g], t.counts[g]] for g in sorted(t.durations)]
            for n, t in sorted(sample.tables.items())
        },
    }


def sample_from_record(subject: str, rec: Mapping) -> GpSample:
    tables = {}
    for n_text, entries in rec["tables"].items():
        n = int(n_text)
        durations = {tuple(g): float(d) for g, d, _ in entries}
        counts = {tuple(g): int(c) for g, _, c in entries}
        tables[n] = NGraphTable(n, durations, counts)
    return GpSample(subject, int(rec["ordinal"]), tables)


def profile_to_record(profile: GpProfile) -> dict:
    return {
        "subject": profile.subject,
        "samples": [sample_to_record(s) for s in profile.samples],
        "mean_self_distance": dict(sorted(profile.mean_self_distance.items())),
    }


def profile_from_record(rec: Mapping) -> GpProfile:
    subject = rec["subject"]
    samples = tuple(sample_from_record(subject, s) for s in rec["samples"])
    return GpProfile(subject, samples, {k: float(v) for k, v in rec["mean_self_distance"].items()})
