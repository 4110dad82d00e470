"""Univariate Gaussian mixtures over hold time, one per (user, digraph).

EM is written out here rather than borrowed: the fit has to expose its
log-likelihood trace, honour a hard variance floor and fall back to a single
component on scant data, none of which a black-box fitter promises.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import FeatureRow

VAR_FLOOR = 1e-8
LOG_2PI = math.log(2.0 * math.pi)
MIN_DIGRAPH_ROWS = 10
IQR_TO_SIGMA = 1.349


class InsufficientData(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


class EmptyProbe(ValueError):
    pass


@dataclass(frozen=True)
class GmmParams:
    weights: tuple[float, ...]
    means: tuple[float, ...]
    variances: tuple[float, ...]
    requested_components: int = 0
    n_iter: int = 0
    converged: bool = True
    trace: tuple[float, ...] = field(default=(), compare=False, repr=False)

    @property
    def M(self) -> int:
        return len(self.weights)

    @property
    def fell_back(self) -> bool:
        return self.requested_components > self.M

    def to_record(self) -> dict:
        return {
            "M": self.M,
            "requested_components": self.requested_components,
            "weights": list(self.weights),
            "means": list(self.means),
            "variances": list(self.variances),
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "GmmParams":
        return cls(
            tuple(float(w) for w in rec["weights"]),
            tuple(float(m) for m in rec["means"]),
            tuple(float(v) for v in rec["variances"]),
            requested_components=int(rec.get("requested_components", rec["M"])),
        )


def _component_logpdf(x: np.ndarray, means, variances) -> np.ndarray:
    """(n, M) array of log N(x; mean_m, var_m)."""
    mu = np.asarray(means, dtype=float)
    var = np.asarray(variances, dtype=float)
    diff = x[:, None] - mu[None, :]
    return -0.5 * (LOG_2PI + np.log(var)[None, :] + diff * diff / var[None, :])


def _weighted_logpdf(x: np.ndarray, weights, means, variances) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_w = np.log(np.asarray(weights, dtype=float))
    return _component_logpdf(x, means, variances) + log_w[None, :]


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1)
    return top + np.log(np.exp(a - top[:, None]).sum(axis=1))


def log_pdf(params: GmmParams, xs) -> np.ndarray:
    x = np.atleast_1d(np.asarray(xs, dtype=float))
    return _logsumexp_rows(_weighted_logpdf(x, params.weights, params.means, params.variances))


def log_likelihood(params: GmmParams, x: float) -> float:
    return float(log_pdf(params, [x])[0])


def _kmeanspp_centers(x: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(x.size)]]
    for _ in range(1, M):
        d2 = np.min((x[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(x.size)])
        else:
            centers.append(x[rng.choice(x.size, p=d2 / total)])
    return np.sort(np.asarray(centers, dtype=float))


def fit_em(
    samples: Sequence[float],
    M: int = 2,
    seed: int = 0,
    *,
    tol: float = 1e-6,
    max_iter: int = 200,
    var_floor: float = VAR_FLOOR,
    on_iteration: Callable[[np.ndarray, np.ndarray, np.ndarray], None] | None = None,
) -> GmmParams:
    """Fit an M-component mixture by EM.

    Starts from k-means++ seeded centres, equal weights and the pooled
    variance. Stops when the log-likelihood gains less than ``tol`` or after
    ``max_iter`` iterations. With fewer than 2*M samples the fit drops to one
    component, which has a closed form.

    ``on_iteration(weights, means, variances)`` is called after each M-step.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if M < 1:
        raise ValueError("M must be >= 1")
    if x.size < max(2, M):
        raise InsufficientData(f"{x.size} samples for M={M}")
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise NonFiniteInput("samples must be finite and positive")

    requested = M
    if x.size < 2 * M:
        M = 1
    n = x.size
    pooled_var = max(float(x.var()), var_floor)

    if M == 1:
        mean = float(x.mean())
        var = max(float(((x - mean) ** 2).mean()), var_floor)
        ll = float(np.sum(_component_logpdf(x, [mean], [var])))
        return GmmParams((1.0,), (mean,), (var,), requested, 1, True, (ll,))

    rng = np.random.default_rng(seed)
    means = _kmeanspp_centers(x, M, rng)
    variances = np.full(M, pooled_var)
    weights = np.full(M, 1.0 / M)

    trace: list[float] = []
    converged = False
    for _ in range(max_iter):
        # E-step on the current parameters
        logp = _weighted_logpdf(x, weights, means, variances)
        row_ll = _logsumexp_rows(logp)
        ll = float(row_ll.sum())
        if trace and ll - trace[-1] < tol:
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        resp = np.exp(logp - row_ll[:, None])

        # M-step; the floored variance is the constrained maximiser, so the
        # likelihood still cannot decrease
        nk = resp.sum(axis=0)
        weights = nk / n
        alive = nk > 0
        safe_nk = np.where(alive, nk, 1.0)
        new_means = (resp * x[:, None]).sum(axis=0) / safe_nk
        means = np.where(alive, new_means, means)
        sq = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / safe_nk
        variances = np.where(alive, np.maximum(sq, var_floor), pooled_var)
        weights = weights / weights.sum()
        if on_iteration is not None:
            on_iteration(weights.copy(), means.copy(), variances.copy())
    else:
        logp = _weighted_logpdf(x, weights, means, variances)
        trace.append(float(_logsumexp_rows(logp).sum()))

    order = np.argsort(means, kind="stable")
    return GmmParams(
        tuple(float(w) for w in weights[order]),
        tuple(float(m) for m in means[order]),
        tuple(float(v) for v in variances[order]),
        requested,
        len(trace),
        converged,
        tuple(trace),
    )


def digraph_seed(seed: int, label: str) -> int:
    """Stable per-digraph seed; Python's str hash is salted per process."""
    return int(np.random.SeedSequence([seed, zlib.crc32(label.encode("utf-8"))]).generate_state(1)[0])


@dataclass(frozen=True)
class GmmUserModel:
    subject: str
    per_digraph: dict[str, GmmParams]
    background: GmmParams
    center: float
    scale: float
    skip_unseen: bool = False

    def params_for(self, digraph: str) -> GmmParams | None:
        p = self.per_digraph.get(digraph)
        if p is None and not self.skip_unseen:
            return self.background
        return p

    def to_record(self) -> dict:
        return {
            "subject": self.subject,
            "digraphs": [
                {"digraph": k, **v.to_record()} for k, v in sorted(self.per_digraph.items())
            ],
            "background": self.background.to_record(),
            "calibration": {"c": self.center, "s": self.scale, "map": "logistic"},
            "skip_unseen": self.skip_unseen,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "GmmUserModel":
        return cls(
            subject=rec["subject"],
            per_digraph={d["digraph"]: GmmParams.from_record(d) for d in rec["digraphs"]},
            background=GmmParams.from_record(rec["background"]),
            center=float(rec["calibration"]["c"]),
            scale=float(rec["calibration"]["s"]),
            skip_unseen=bool(rec.get("skip_unseen", False)),
        )


def _row_log_likelihoods(model: GmmUserModel, rows: Sequence[FeatureRow]) -> np.ndarray:
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(rows):
        groups.setdefault(r.key, []).append(i)
    out = np.full(len(rows), np.nan)
    for key, idx in groups.items():
        params = model.params_for(key)
        if params is None:
            continue
        out[idx] = log_pdf(params, [rows[i].H for i in idx])
    return out


def fit_user(
    rows: Sequence[FeatureRow],
    M: int = 2,
    seed: int = 0,
    *,
    min_rows: int = MIN_DIGRAPH_ROWS,
    skip_unseen: bool = False,
) -> GmmUserModel:
    """Fit one mixture per well-populated digraph plus a background mixture.

    Digraphs with fewer than ``min_rows`` training rows are scored by the
    background model.
    """
    if len(rows) < 2:
        raise InsufficientData(f"{len(rows)} training rows")
    subject = rows[0].subject
    by_key: dict[str, list[float]] = {}
    for r in rows:
        by_key.setdefault(r.key, []).append(r.H)
    per_digraph = {
        key: fit_em(holds, M, digraph_seed(seed, key))
        for key, holds in sorted(by_key.items())
        if len(holds) >= min_rows
    }
    background = fit_em([r.H for r in rows], M, seed)
    uncalibrated = GmmUserModel(subject, per_digraph, background, 0.0, 1.0)
    train_ll = _row_log_likelihoods(uncalibrated, rows)
    c = float(np.median(train_ll))
    q75, q25 = np.percentile(train_ll, [75, 25])
    s = float(q75 - q25) / IQR_TO_SIGMA
    if not s > 1e-9:
        s = 1e-9
    return GmmUserModel(subject, per_digraph, background, c, s, skip_unseen)


def _logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def score_probe(model: GmmUserModel, probe: Sequence[FeatureRow]) -> float:
    """Mean per-row log-likelihood, squashed to [0, 1] with the stored calibration."""
    if not probe:
        raise EmptyProbe("probe has no rows")
    ll = _row_log_likelihoods(model, probe)
    ll = ll[~np.isnan(ll)]
    if ll.size == 0:
        # every digraph unseen under skip_unseen: fall back rather than drop the probe
        ll = log_pdf(model.background, [r.H for r in probe])
    mean_ll = math.fsum(ll.tolist()) / ll.size
    return _logistic((mean_ll - model.center) / model.scale)


class GmmDetector:
    name = "gmm"

    def __init__(self, M: int = 2, seed: int = 0, block: int = 10,
                 min_rows: int = MIN_DIGRAPH_ROWS, skip_unseen: bool = False):
        self.M = M
        self.seed = seed
        self.block = block
        self.min_rows = min_rows
        self.skip_unseen = skip_unseen

    def fit(self, rows: Sequence[FeatureRow]) -> GmmUserModel:
        return fit_user(rows, self.M, self.seed, min_rows=self.min_rows, skip_unseen=self.skip_unseen)

    def score(self, model: GmmUserModel, probe: Sequence[FeatureRow]) -> float:
        return score_probe(model, probe)

    def describe(self) -> dict:
        return {
            "detector": self.name,
            "components": self.M,
            "seed": self.seed,
            "block": self.block,
            "min_rows": self.min_rows,
            "skip_unseen": self.skip_unseen,
            "score_map": "logistic((mean_ll - median)/(iqr/1.349))",
        }
