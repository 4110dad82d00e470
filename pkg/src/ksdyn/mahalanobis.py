"""Per-user Mahalanobis anomaly detector over (H, UD, DD) vectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import FeatureRow

PINV_RCOND = 1e-12


class InsufficientData(ValueError):
    def __init__(self, n: int, needed: int = 2):
        super().__init__(f"need at least {needed} rows, got {n}")
        self.n = n


@dataclass(frozen=True)
class MahalanobisModel:
    subject: str
    mean: np.ndarray
    s_pinv: np.ndarray
    n_train: int
    degenerate: bool = False

    def to_record(self) -> dict:
        return {
            "subject": self.subject,
            "mean": [float(v) for v in self.mean],
            "s_pinv": [float(v) for v in self.s_pinv.ravel()],
            "n_train": self.n_train,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MahalanobisModel":
        mean = np.asarray(rec["mean"], dtype=float)
        d = mean.size
        return cls(
            subject=rec["subject"],
            mean=mean,
            s_pinv=np.asarray(rec["s_pinv"], dtype=float).reshape(d, d),
            n_train=int(rec["n_train"]),
            degenerate=bool(rec.get("degenerate", False)),
        )


def fit_matrix(X, subject: str = "") -> MahalanobisModel:
    """Fit from an (n, d) array. Covariance uses the n-1 denominator."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InsufficientData(0 if X.ndim != 2 else X.shape[0])
    mean = X.mean(axis=0)
    S = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    degenerate = bool(np.all(X == X[0]))
    if degenerate:
        s_pinv = np.zeros_like(S)
    else:
        s_pinv = np.linalg.pinv(S, rcond=PINV_RCOND, hermitian=True)
        s_pinv = 0.5 * (s_pinv + s_pinv.T)
    return MahalanobisModel(subject, mean, s_pinv, X.shape[0], degenerate)


def fit(rows: Sequence[FeatureRow]) -> MahalanobisModel:
    if len(rows) < 2:
        raise InsufficientData(len(rows))
    subject = rows[0].subject
    if any(r.subject != subject for r in rows):
        raise ValueError("all training rows must belong to one subject")
    return fit_matrix([r.vector for r in rows], subject)


def distance2(model: MahalanobisModel, x) -> float:
    d = np.asarray(x, dtype=float) - model.mean
    return max(float(d @ model.s_pinv @ d), 0.0)


def score(model: MahalanobisModel, x) -> float:
    return 1.0 / (1.0 + distance2(model, x))


class MahalanobisDetector:
    """Adapter for the evaluation harness.

    ``block`` is the probe length used by the harness. A probe of several rows
    is scored on its mean squared distance, so block=1 is plain per-row scoring.
    """

    name = "mahalanobis"

    def __init__(self, block: int = 1):
        self.block = block

    def fit(self, rows: Sequence[FeatureRow]) -> MahalanobisModel:
        return fit(rows)

    def score(self, model: MahalanobisModel, probe: Sequence[FeatureRow]) -> float:
        X = np.array([r.vector for r in probe], dtype=float) - model.mean
        d2 = np.einsum("ij,jk,ik->i", X, model.s_pinv, X)
        return 1.0 / (1.0 + float(np.maximum(d2, 0.0).mean()))

    def describe(self) -> dict:
        return {"detector": self.name, "block": self.block, "score_map": "1/(1+d2)"}
