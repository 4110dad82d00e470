"""Genuine/impostor protocols, threshold sweeps and FAR/FRR/EER/AUC."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np

from . import gp
from .core import FeatureRow, FeatureTable, Sample, segment

log = logging.getLogger(__name__)

GRID_STEP = 0.001
GP_K_MAX = 3.0


class InsufficientData(ValueError):
    pass


class NoImpostors(ValueError):
    pass


class EmptyTrials(ValueError):
    pass


def max_threads() -> int:
    """Worker cap, from ``KSDYN_THREADS`` when set."""
    env = os.environ.get("KSDYN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer KSDYN_THREADS=%r", env)
    return min(8, os.cpu_count() or 1)


def split_70_30(rows: Sequence[FeatureRow], ratio: float = 0.7, min_rows: int = 10):
    """Chronological prefix split: the first floor(ratio*n) rows train."""
    n = len(rows)
    if n < min_rows:
        raise InsufficientData(f"need {min_rows} rows to split, got {n}")
    cut = math.floor(ratio * n)
    return list(rows[:cut]), list(rows[cut:])


def impostor_probes(samples_by_subject: Mapping[str, Sequence[Sample]], target: str, count: int = 5) -> list[Sample]:
    """The first ``count`` samples of every subject other than ``target``."""
    others = [s for s in samples_by_subject if s != target]
    if not others:
        raise NoImpostors(f"no subjects besides {target}")
    probes: list[Sample] = []
    for subject in others:
        probes.extend(samples_by_subject[subject][:count])
    return probes


@dataclass(frozen=True)
class TrialSet:
    genuine: tuple[float, ...]
    impostor: tuple[float, ...]
    detector: str = ""
    dataset: str = ""
    protocol: str = ""

    def check(self) -> None:
        if not self.genuine or not self.impostor:
            raise EmptyTrials("need both genuine and impostor scores")


def far(trials: TrialSet, threshold: float) -> float:
    trials.check()
    return sum(1 for s in trials.impostor if s >= threshold) / len(trials.impostor)


def frr(trials: TrialSet, threshold: float) -> float:
    trials.check()
    return sum(1 for s in trials.genuine if s < threshold) / len(trials.genuine)


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    eer: float
    eer_threshold: float
    auc: float

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.frr.tolist()))

    def caption(self) -> str:
        return f"AUC = {self.auc:.3f}, EER = {self.eer:.3f}"


def threshold_grid(step: float = GRID_STEP) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.round(np.arange(n + 1) * step, 12)


def sweep(trials: TrialSet, step: float = GRID_STEP) -> RocCurve:
    """FAR/FRR on a uniform threshold grid over [0, 1], with EER and AUC.

    Accept iff score >= threshold. EER is read where FAR - FRR changes sign,
    interpolating linearly between the bracketing grid points. AUC is the
    trapezoid area under (FAR, 1 - FRR), closed at (0, 0) and, when needed,
    (1, 1); its resolution is limited by the grid.
    """
    trials.check()
    gen = np.sort(np.asarray(trials.genuine, dtype=float))
    imp = np.sort(np.asarray(trials.impostor, dtype=float))
    thr = threshold_grid(step)
    far_v = (imp.size - np.searchsorted(imp, thr, side="left")) / imp.size
    frr_v = np.searchsorted(gen, thr, side="left") / gen.size

    diff = far_v - frr_v
    below = np.nonzero(diff <= 0)[0]
    if below.size == 0:
        eer = 0.5 * (far_v[-1] + frr_v[-1])
        eer_thr = float(thr[-1])
    elif below[0] == 0:
        eer = 0.5 * (far_v[0] + frr_v[0])
        eer_thr = float(thr[0])
    else:
        i = below[0]
        alpha = diff[i - 1] / (diff[i - 1] - diff[i])
        eer = far_v[i - 1] + alpha * (far_v[i] - far_v[i - 1])
        eer_thr = float(thr[i - 1] + alpha * (thr[i] - thr[i - 1]))

    # walk from the strictest threshold to the loosest so FAR increases
    x = np.concatenate(([0.0], far_v[::-1], [1.0]))
    y = np.concatenate(([0.0], 1.0 - frr_v[::-1], [1.0]))
    auc = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) * 0.5))
    return RocCurve(thr, far_v, frr_v, float(eer), eer_thr, auc)


def mann_whitney_auc(genuine: Sequence[float], impostor: Sequence[float]) -> float:
    """Exact AUC as the normalised rank-sum statistic (ties count one half)."""
    g = np.asarray(genuine, dtype=float)
    i = np.asarray(impostor, dtype=float)
    allv = np.concatenate([g, i])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(allv.size)
    sorted_v = allv[order]
    start = 0
    while start < allv.size:
        end = start
        while end + 1 < allv.size and sorted_v[end + 1] == sorted_v[start]:
            end += 1
        ranks[order[start:end + 1]] = 0.5 * (start + end) + 1.0
        start = end + 1
    u = ranks[: g.size].sum() - g.size * (g.size + 1) / 2.0
    return float(u / (g.size * i.size))


# -- protocols ---------------------------------------------------------------


class Detector(Protocol):
    name: str
    block: int

    def fit(self, rows: Sequence[FeatureRow]) -> Any: ...

    def score(self, model: Any, probe: Sequence[FeatureRow]) -> float: ...

    def describe(self) -> dict: ...


@dataclass(frozen=True)
class EvalProtocol:
    split: float = 0.7
    impostor_count: int = 5
    min_rows: int = 10
    gp_block: int = 700
    gp_k: float = 1.0
    gp_rescue: float = gp.DEFAULT_RESCUE

    def describe(self) -> dict:
        return asdict(self)


@dataclass
class EvaluationResult:
    detector: str
    dataset: str
    pooled: RocCurve
    trials: TrialSet
    per_subject: dict[str, RocCurve] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    subject_count: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def summary_row(self) -> dict:
        return {
            "detector": self.detector,
            "dataset": self.dataset,
            "subject_count": self.subject_count,
            "auc": round(self.pooled.auc, 6),
            "eer": round(self.pooled.eer, 6),
        }

    def report(self) -> str:
        lines = [f"{self.detector} on {self.dataset}: {self.pooled.caption()}",
                 f"  subjects={self.subject_count} genuine={len(self.trials.genuine)} "
                 f"impostor={len(self.trials.impostor)}"]
        for subject, reason in self.failures.items():
            lines.append(f"  skipped {subject}: {reason}")
        return "\n".join(lines)


def _per_subject_curve(gen: Sequence[float], imp: Sequence[float]) -> RocCurve | None:
    if not gen or not imp:
        return None
    return sweep(TrialSet(tuple(gen), tuple(imp)))


def _map(fn: Callable, items: Sequence, threads: int | None):
    workers = threads or max_threads()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def evaluate(detector: Detector, table: FeatureTable, protocol: EvalProtocol = EvalProtocol(),
             dataset: str | None = None, threads: int | None = None) -> EvaluationResult:
    """Fit each subject on its training prefix and score genuine and impostor probes.

    Genuine probes are the subject's held-out suffix cut into blocks of
    ``detector.block`` rows; impostor probes are the first
    ``protocol.impostor_count`` blocks of every other subject. Scores from
    all subjects are pooled into one curve.
    """
    groups = table.by_subject()
    if len(groups) < 2:
        raise NoImpostors("evaluation needs at least two subjects")
    dataset = dataset or (table.source.value if table.source else "unknown")
    block = detector.block
    samples = {s: segment(rows, block) for s, rows in groups.items()}

    def run(subject: str):
        try:
            train, test = split_70_30(groups[subject], protocol.split, protocol.min_rows)
            model = detector.fit(train)
            gen = [detector.score(model, p.rows) for p in segment(test, block)]
            imp = [detector.score(model, p.rows)
                   for p in impostor_probes(samples, subject, protocol.impostor_count)]
            if not gen:
                raise InsufficientData("no genuine probe blocks in the test split")
            return subject, gen, imp, None
        except (ValueError, KeyError) as exc:
            return subject, [], [], f"{type(exc).__name__}: {exc}"

    results = _map(run, list(groups), threads)
    gen_all: list[float] = []
    imp_all: list[float] = []
    per_subject = {}
    failures = {}
    for subject, gen, imp, err in results:
        if err:
            failures[subject] = err
            continue
        gen_all.extend(gen)
        imp_all.extend(imp)
        curve = _per_subject_curve(gen, imp)
        if curve is not None:
            per_subject[subject] = curve
    desc = {**detector.describe(), **protocol.describe()}
    trials = TrialSet(tuple(gen_all), tuple(imp_all), detector.name, dataset, repr(desc))
    if not gen_all or not imp_all:
        raise EmptyTrials(f"{detector.name} on {dataset}: every subject failed ({failures})")
    return EvaluationResult(detector.name, dataset, sweep(trials), trials, per_subject,
                            failures, len(per_subject), {"protocol": desc})


# -- Gunetti-Picardi ---------------------------------------------------------


@dataclass
class GpTrials:
    """Critical k values per claim: a claim is accepted at k iff k > k*."""

    spec: gp.MeasureSpec
    genuine_k: np.ndarray
    impostor_k: np.ndarray
    claimed_genuine: list[str]
    claimed_impostor: list[str]

    def rates(self, k: float) -> tuple[float, float]:
        far_v = float(np.mean(self.impostor_k < k))
        frr_v = float(np.mean(~(self.genuine_k < k)))
        return far_v, frr_v

    def scores(self, k_max: float = GP_K_MAX) -> tuple[np.ndarray, np.ndarray]:
        def to_score(k):
            return np.clip(1.0 - np.where(np.isfinite(k), k, np.inf) / k_max, 0.0, 1.0)
        return to_score(self.genuine_k), to_score(self.impostor_k)

    def operating_point(self, k_max: float = GP_K_MAX, step: float = GRID_STEP * GP_K_MAX):
        """k on a grid over (0, k_max] minimising |FAR - FRR|."""
        best = None
        for k in np.arange(1, int(round(k_max / step)) + 1) * step:
            f, r = self.rates(float(k))
            key = (abs(f - r), (f + r) / 2, k)
            if best is None or key < best[0]:
                best = (key, float(k), f, r)
        _, k, f, r = best
        return k, f, r


@dataclass
class GpRun:
    profiles: dict[str, gp.GpProfile]
    probes: dict[str, list[gp.GpSample]]
    failures: dict[str, str]
    cache: gp.DistanceCache


def prepare_gp(table: FeatureTable, protocol: EvalProtocol = EvalProtocol(),
               specs: Sequence[gp.MeasureSpec] = ()) -> GpRun:
    """Cut each subject into samples; the first ``split`` share is enrolled, the rest probes."""
    cache = gp.DistanceCache()
    profiles: dict[str, gp.GpProfile] = {}
    probes: dict[str, list[gp.GpSample]] = {}
    failures: dict[str, str] = {}
    orders = sorted({n for s in specs for n in s.orders} | set(gp.ORDERS))
    for subject, rows in table.by_subject().items():
        samples = [gp.build_sample(s.rows, s.ordinal, orders) for s in segment(rows, protocol.gp_block)]
        cut = math.floor(protocol.split * len(samples))
        if cut < 2 or cut >= len(samples):
            failures[subject] = f"{len(samples)} samples of {protocol.gp_block} rows is too few"
            continue
        profiles[subject] = gp.enroll(subject, samples[:cut], specs, cache)
        probes[subject] = samples[cut:]
    if len(profiles) < 2:
        raise NoImpostors("GP evaluation needs at least two enrolled subjects")
    return GpRun(profiles, probes, failures, cache)


def gp_trials(run: GpRun, spec: gp.MeasureSpec, protocol: EvalProtocol = EvalProtocol()) -> GpTrials:
    """All probes against all enrolled users: own-user claims are genuine, the rest impostor."""
    gallery = list(run.profiles.values())
    gen_k, imp_k, gen_c, imp_c = [], [], [], []
    for owner in sorted(run.probes):
        for probe in run.probes[owner]:
            ranking = gp.classify(probe, gallery, spec, run.cache)
            for profile in gallery:
                k = gp.critical_k(ranking, profile.subject,
                                  profile.self_distance(spec, run.cache), protocol.gp_rescue)
                if profile.subject == owner:
                    gen_k.append(k)
                    gen_c.append(profile.subject)
                else:
                    imp_k.append(k)
                    imp_c.append(profile.subject)
    return GpTrials(spec, np.asarray(gen_k, dtype=float), np.asarray(imp_k, dtype=float), gen_c, imp_c)


def evaluate_gp(table: FeatureTable, spec: gp.MeasureSpec, protocol: EvalProtocol = EvalProtocol(),
                dataset: str | None = None, run: GpRun | None = None) -> EvaluationResult:
    """Score GP claims on the [0, 1] sweep by mapping threshold s to k = 3(1 - s)."""
    dataset = dataset or (table.source.value if table.source else "unknown")
    if run is None:
        run = prepare_gp(table, protocol, [spec])
    trials_k = gp_trials(run, spec, protocol)
    gen_s, imp_s = trials_k.scores()
    desc = {"detector": "gp", "measure": spec.name, "t": spec.t, **protocol.describe()}
    trials = TrialSet(tuple(gen_s.tolist()), tuple(imp_s.tolist()), "gp", dataset, repr(desc))
    per_subject = {}
    for subject in run.profiles:
        g = [s for s, c in zip(gen_s, trials_k.claimed_genuine) if c == subject]
        i = [s for s, c in zip(imp_s, trials_k.claimed_impostor) if c == subject]
        curve = _per_subject_curve(g, i)
        if curve is not None:
            per_subject[subject] = curve
    far_k, frr_k = trials_k.rates(protocol.gp_k)
    return EvaluationResult("gp", dataset, sweep(trials), trials, per_subject, dict(run.failures),
                            len(run.profiles),
                            {"protocol": desc, "far_at_k": far_k, "frr_at_k": frr_k, "gp_trials": trials_k})
