"""Versioned on-disk profile store.

Layout: ``<root>/<detector>/<subject>.ksd``, one file per subject. Each file
is UTF-8 text: the magic line ``KSDYN1`` followed by a single JSON object
``{"detector": ..., "subject": ..., "run": ..., "record": {...}}``.
"""

from __future__ import annotations

import json
from pathlib import Path
from urllib.parse import quote, unquote

MAGIC = "KSDYN1"
SUFFIX = ".ksd"


class StoreError(Exception):
    pass


def record_path(root: str | Path, detector: str, subject: str) -> Path:
    # subject ids may contain path separators or other unsafe characters
    return Path(root) / detector / (quote(subject, safe="") + SUFFIX)


def write_record(root: str | Path, detector: str, subject: str, record: dict, run: str | None = None) -> Path:
    path = record_path(root, detector, subject)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = json.dumps({"detector": detector, "subject": subject, "run": run, "record": record},
                      sort_keys=True, separators=(",", ":"))
    path.write_text(f"{MAGIC}\n{body}\n", encoding="utf-8")
    return path


def read_record(path: str | Path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    magic, _, body = text.partition("\n")
    if magic.strip() != MAGIC:
        raise StoreError(f"{path}: not a {MAGIC} profile record")
    try:
        return json.loads(body)
    except json.JSONDecodeError as exc:
        raise StoreError(f"{path}: corrupt record ({exc})") from None


def load_detector(root: str | Path, detector: str) -> dict[str, dict]:
    """All records of one detector, keyed by subject, in subject order."""
    folder = Path(root) / detector
    if not folder.is_dir():
        raise StoreError(f"no {detector} profiles under {root}")
    out = {}
    for path in sorted(folder.glob("*" + SUFFIX)):
        doc = read_record(path)
        if doc.get("detector") != detector:
            raise StoreError(f"{path}: record is for {doc.get('detector')!r}")
        out[doc.get("subject", unquote(path.stem))] = doc["record"]
    return dict(sorted(out.items()))
