"""Shared value types for keystroke timing data.

All times are seconds stored as floats. Parsers convert from their source
units before anything reaches these types.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Sequence

DIGRAPH_SEP = "→"
DEFAULT_PAUSE_CUTOFF = 10.0


class Action(str, Enum):
    DOWN = "Down"
    UP = "Up"


class Source(str, Enum):
    AALTO = "Aalto"
    BUFFALO_FIXED = "BuffaloFixed"
    BUFFALO_FREE = "BuffaloFree"
    NANGLAE = "Nanglae"
    SYNTHETIC = "Synthetic"

    @property
    def free_text(self) -> bool:
        return self is Source.BUFFALO_FREE

    @classmethod
    def parse(cls, text: str) -> "Source":
        """Accept enum values or loose CLI spellings like ``buffalo-free``."""
        norm = text.replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == norm:
                return member
        raise ValueError(f"unknown dataset tag {text!r}")


@dataclass(frozen=True, slots=True)
class KeystrokeEvent:
    key: str
    action: Action
    timestamp: float

    def __post_init__(self) -> None:
        if not self.key:
            raise ValueError("key label must be non-empty")
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise ValueError(f"bad timestamp {self.timestamp!r}")


def digraph_label(first: str, second: str) -> str:
    return f"{first}{DIGRAPH_SEP}{second}"


def split_digraph(label: str) -> tuple[str, str]:
    first, sep, second = label.partition(DIGRAPH_SEP)
    if not sep:
        raise ValueError(f"not a digraph label: {label!r}")
    return first, second


@dataclass(frozen=True, slots=True)
class FeatureRow:
    """Timing of one ordered key pair: hold of the first key, then the gaps."""

    subject: str
    key: str
    H: float
    UD: float
    DD: float

    @property
    def keys(self) -> tuple[str, str]:
        return split_digraph(self.key)

    @property
    def vector(self) -> tuple[float, float, float]:
        return (self.H, self.UD, self.DD)


class RowIssue(str, Enum):
    NON_FINITE = "non-finite value"
    NONPOSITIVE_H = "H must be > 0"
    NEGATIVE_UD = "negative UD"
    NONPOSITIVE_DD = "DD must be > 0"
    PAUSE = "pause exceeds cutoff"

    @property
    def is_pause(self) -> bool:
        return self is RowIssue.PAUSE


def validate_row(
    row: FeatureRow,
    *,
    pause_cutoff: float = DEFAULT_PAUSE_CUTOFF,
    keep_negative_ud: bool = False,
) -> RowIssue | None:
    """Return the first problem with ``row``, or None when it is usable."""
    if not all(math.isfinite(v) for v in row.vector):
        return RowIssue.NON_FINITE
    if row.H <= 0:
        return RowIssue.NONPOSITIVE_H
    if row.UD < 0 and not keep_negative_ud:
        return RowIssue.NEGATIVE_UD
    if row.DD <= 0:
        return RowIssue.NONPOSITIVE_DD
    if row.H > pause_cutoff or row.DD > pause_cutoff:
        return RowIssue.PAUSE
    return None


@dataclass(frozen=True)
class FeatureTable:
    """Feature rows in chronological order within each subject."""

    rows: tuple[FeatureRow, ...]
    source: Source | None = None
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.rows, tuple):
            object.__setattr__(self, "rows", tuple(self.rows))

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[FeatureRow]:
        return iter(self.rows)

    def _groups(self) -> dict[str, tuple[FeatureRow, ...]]:
        if self._index is None:
            groups: OrderedDict[str, list[FeatureRow]] = OrderedDict()
            for row in self.rows:
                groups.setdefault(row.subject, []).append(row)
            object.__setattr__(self, "_index", OrderedDict((k, tuple(v)) for k, v in groups.items()))
        return self._index

    def by_subject(self) -> "OrderedDict[str, list[FeatureRow]]":
        """Rows grouped per subject, subjects in order of first appearance."""
        return OrderedDict((k, list(v)) for k, v in self._groups().items())

    @property
    def subjects(self) -> list[str]:
        return list(self._groups())

    def rows_for(self, subject: str) -> list[FeatureRow]:
        return list(self._groups().get(subject, ()))

    def allclose(self, other: "FeatureTable", tol: float = 1e-9) -> bool:
        if len(self) != len(other):
            return False
        for a, b in zip(self.rows, other.rows):
            if a.subject != b.subject or a.key != b.key:
                return False
            if any(abs(x - y) > tol for x, y in zip(a.vector, b.vector)):
                return False
        return True

    @classmethod
    def concat(cls, tables: Iterable["FeatureTable"], source: Source | None = None) -> "FeatureTable":
        """Merge tables, regrouping rows per subject without reordering them."""
        groups: OrderedDict[str, list[FeatureRow]] = OrderedDict()
        for table in tables:
            for row in table.rows:
                groups.setdefault(row.subject, []).append(row)
        rows = [r for rs in groups.values() for r in rs]
        return cls(tuple(rows), source)


@dataclass(frozen=True)
class Sample:
    subject: str
    rows: tuple[FeatureRow, ...]
    ordinal: int

    def __post_init__(self) -> None:
        if not self.rows:
            raise ValueError("sample needs at least one row")
        if any(r.subject != self.subject for r in self.rows):
            raise ValueError("sample rows must share the sample's subject")


def segment(rows: Sequence[FeatureRow], block: int) -> list[Sample]:
    """Cut a subject's stream into consecutive non-overlapping blocks.

    A trailing block shorter than ``block`` is dropped so every sample
    carries the same amount of evidence.
    """
    if block < 1:
        raise ValueError("block size must be >= 1")
    if not rows:
        return []
    subject = rows[0].subject
    out = []
    for ordinal, start in enumerate(range(0, len(rows) - block + 1, block)):
        out.append(Sample(subject, tuple(rows[start:start + block]), ordinal))
    return out
