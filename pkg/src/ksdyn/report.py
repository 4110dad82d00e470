"""CSV and SVG outputs for evaluation runs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import RocCurve  # noqa: E402

SUMMARY_HEADER = ("detector", "dataset", "subject_count", "auc", "eer")


def _comment(fh, run: str | None) -> None:
    if run:
        fh.write(f"# run={run}\n")


def read_csv_skipping_comments(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def write_roc_csv(curve: RocCurve, path: str | Path, run: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _comment(fh, run)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "far", "frr"))
        for t, fa, fr in curve.points:
            w.writerow((f"{t:.3f}", f"{fa:.6f}", f"{fr:.6f}"))


def write_summary_csv(rows: Iterable[Mapping], path: str | Path, run: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _comment(fh, run)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow((r["detector"], r["dataset"], r["subject_count"], f"{r['auc']:.6f}", f"{r['eer']:.6f}"))


def _save_svg(fig, path: str | Path, run: str | None) -> None:
    matplotlib.rcParams["svg.hashsalt"] = "ksdyn"
    meta = {"Date": None}
    if run:
        meta["Description"] = f"run={run}"
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)


def plot_roc(curve: RocCurve, path: str | Path, title: str, run: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(curve.far, 1.0 - curve.frr, lw=1.5)
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set_xlabel("False Accept Rate")
    ax.set_ylabel("Genuine Accept Rate (1 - FRR)")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_title(f"{title}\n{curve.caption()}")
    fig.tight_layout()
    _save_svg(fig, path, run)


def plot_threshold(curve: RocCurve, path: str | Path, title: str, run: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(curve.thresholds, curve.far, label="FAR")
    ax.plot(curve.thresholds, curve.frr, label="FRR")
    ax.axvline(curve.eer_threshold, ls=":", color="grey")
    ax.set_xlabel("Threshold")
    ax.set_ylabel("Rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title(f"{title}  (EER = {curve.eer:.3f})")
    fig.tight_layout()
    _save_svg(fig, path, run)


def format_gp_table(rows: list[Mapping], dataset: str) -> str:
    """Render per-measure FAR/FRR percentages as a two-row matrix."""
    names = [r["measure"] for r in rows]
    width = max(6, *(len(n) + 1 for n in names))
    head = "".ljust(5) + "".join(n.rjust(width) for n in names)
    far_line = "FAR".ljust(5) + "".join(f"{100 * r['far']:.0f}%".rjust(width) for r in rows)
    frr_line = "FRR".ljust(5) + "".join(f"{100 * r['frr']:.0f}%".rjust(width) for r in rows)
    return "\n".join([dataset, head, far_line, frr_line])
