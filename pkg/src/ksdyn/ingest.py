"""Raw dataset parsers and the canonical feature CSV.

Three raw layouts are understood:

* Buffalo event logs, one ``<key> <KeyDown|KeyUp> <ms>`` triple per line,
  discovered through a manifest CSV (``path,subject,session,task,keyboard_condition``).
* Aalto per-keystroke tables with press/release columns in milliseconds.
* Nanglae-Bhattarakosol sheets that were already feature-extracted and
  exported to CSV with ``subject,key,H,UD,DD`` columns in seconds.
"""

from __future__ import annotations

import csv
import io
import logging
import statistics
from collections import OrderedDict, defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .core import (
    DEFAULT_PAUSE_CUTOFF,
    Action,
    FeatureRow,
    FeatureTable,
    KeystrokeEvent,
    Source,
    digraph_label,
    validate_row,
)

log = logging.getLogger(__name__)

CANONICAL_HEADER = ("subject", "key", "H", "UD", "DD")
MANIFEST_HEADER = ("path", "subject", "session", "task", "keyboard_condition")
AALTO_REQUIRED = (
    "PARTICIPANT_ID",
    "TEST_SECTION_ID",
    "KEYSTROKE_ID",
    "PRESS_TIME",
    "RELEASE_TIME",
    "LETTER",
    "KEYCODE",
)
NANGLAE_MS_MEDIAN_H = 5.0

_ACTIONS = {"KeyDown": Action.DOWN, "KeyUp": Action.UP}


class IngestError(Exception):
    """Fatal problem with an input file."""


class FileEmpty(IngestError):
    def __init__(self, report: "ParseReport | None" = None, what: str = "input"):
        super().__init__(f"no valid events in {what}")
        self.report = report


class NoCompletePairs(IngestError):
    pass


class MissingColumn(IngestError):
    def __init__(self, name: str):
        super().__init__(f"missing column {name}")
        self.name = name


class UnitSuspicion(IngestError):
    def __init__(self, median_h: float):
        super().__init__(
            f"median hold time is {median_h:g}, which looks like milliseconds; "
            "convert the timing columns to seconds before ingesting"
        )
        self.median_h = median_h


class HeaderMismatch(IngestError):
    pass


@dataclass
class ParseReport:
    lines: int = 0
    events: int = 0
    rows_emitted: int = 0
    rows_filtered_negative: int = 0
    rows_filtered_pause: int = 0
    unmatched_downs: int = 0
    unmatched_ups: int = 0
    malformed: list[int] = field(default_factory=list)
    skipped_files: list[str] = field(default_factory=list)

    def merge(self, other: "ParseReport") -> None:
        for name in ("lines", "events", "rows_emitted", "rows_filtered_negative",
                     "rows_filtered_pause", "unmatched_downs", "unmatched_ups"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self.malformed.extend(other.malformed)
        self.skipped_files.extend(other.skipped_files)

    def __str__(self) -> str:
        parts = [
            f"lines={self.lines}",
            f"events={self.events}",
            f"rows_emitted={self.rows_emitted}",
            f"rows_filtered_negative={self.rows_filtered_negative}",
            f"rows_filtered_pause={self.rows_filtered_pause}",
            f"unmatched_downs={self.unmatched_downs}",
            f"unmatched_ups={self.unmatched_ups}",
            f"malformed={len(self.malformed)}",
        ]
        if self.skipped_files:
            parts.append(f"skipped_files={len(self.skipped_files)}")
        return " ".join(parts)


def _keep(row: FeatureRow, report: ParseReport, pause_cutoff: float, keep_negative_ud: bool) -> bool:
    issue = validate_row(row, pause_cutoff=pause_cutoff, keep_negative_ud=keep_negative_ud)
    if issue is None:
        report.rows_emitted += 1
        return True
    if issue.is_pause:
        report.rows_filtered_pause += 1
    else:
        report.rows_filtered_negative += 1
    return False


# -- Buffalo -----------------------------------------------------------------


def parse_buffalo_events(raw_text: str, report: ParseReport | None = None) -> list[KeystrokeEvent]:
    """Parse a Buffalo event log. Timestamps come in as ms and leave as seconds."""
    if report is None:
        report = ParseReport()
    events = []
    for line_no, line in enumerate(raw_text.splitlines(), start=1):
        if not line.strip():
            continue
        report.lines += 1
        # key names may themselves contain spaces, so split from the right
        parts = line.strip().rsplit(None, 2)
        if len(parts) != 3 or parts[1] not in _ACTIONS:
            report.malformed.append(line_no)
            continue
        key, action, stamp = parts
        try:
            ms = int(stamp)
            event = KeystrokeEvent(key, _ACTIONS[action], ms / 1000.0)
        except ValueError:
            report.malformed.append(line_no)
            continue
        events.append(event)
    report.events += len(events)
    if not events:
        raise FileEmpty(report)
    return events


def _complete_presses(events: Sequence[KeystrokeEvent], report: ParseReport) -> list[tuple[str, float, float]]:
    ordered = sorted(events, key=lambda e: e.timestamp)
    pending: dict[str, deque[int]] = defaultdict(deque)
    presses: list[tuple[str, float, float] | None] = []
    for ev in ordered:
        if ev.action is Action.DOWN:
            pending[ev.key].append(len(presses))
            presses.append((ev.key, ev.timestamp, float("nan")))
        else:
            queue = pending.get(ev.key)
            if not queue:
                report.unmatched_ups += 1
                continue
            idx = queue.popleft()
            key, down, _ = presses[idx]
            presses[idx] = (key, down, ev.timestamp)
    for queue in pending.values():
        for idx in queue:
            presses[idx] = None
            report.unmatched_downs += 1
    return [p for p in presses if p is not None]


def events_to_features(
    events: Sequence[KeystrokeEvent],
    subject: str,
    *,
    report: ParseReport | None = None,
    pause_cutoff: float = DEFAULT_PAUSE_CUTOFF,
    keep_negative_ud: bool = False,
    source: Source | None = None,
) -> FeatureTable:
    """Pair consecutive completed key presses into feature rows.

    Key-ups are matched to key-downs of the same label first-in-first-out.
    Downs that never see an up are dropped and counted in ``report``.
    """
    if report is None:
        report = ParseReport()
    presses = _complete_presses(events, report)
    if len(presses) < 2:
        raise NoCompletePairs(f"{subject}: {len(presses)} completed key presses")
    rows = []
    for (k1, d1, u1), (k2, d2, _) in zip(presses, presses[1:]):
        row = FeatureRow(subject, digraph_label(k1, k2), u1 - d1, d2 - u1, d2 - d1)
        if _keep(row, report, pause_cutoff, keep_negative_ud):
            rows.append(row)
    return FeatureTable(tuple(rows), source)


@dataclass(frozen=True)
class BuffaloSessionMeta:
    path: str
    subject: str
    session: int
    task: int
    keyboard_condition: str

    def __post_init__(self) -> None:
        if self.task not in (0, 1):
            raise ValueError(f"task must be 0 (fixed) or 1 (free), got {self.task}")


def read_manifest(path: str | Path) -> list[BuffaloSessionMeta]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_HEADER if c not in (reader.fieldnames or ())]
        if missing:
            raise MissingColumn(missing[0])
        entries = []
        for rec in reader:
            entries.append(BuffaloSessionMeta(
                path=rec["path"],
                subject=rec["subject"],
                session=int(rec["session"]),
                task=int(rec["task"]),
                keyboard_condition=rec["keyboard_condition"],
            ))
    return entries


def ingest_buffalo(
    manifest: str | Path,
    root: str | Path,
    *,
    task: int | None = None,
    sessions: Iterable[int] | None = None,
    pause_cutoff: float = DEFAULT_PAUSE_CUTOFF,
    keep_negative_ud: bool = False,
    report: ParseReport | None = None,
) -> FeatureTable:
    """Parse every manifest file and concatenate per subject, sessions in order.

    Rows never pair keys across two files. Files with no usable pairs are
    listed in ``report.skipped_files`` rather than aborting the run.
    """
    if report is None:
        report = ParseReport()
    entries = read_manifest(manifest)
    if task is not None:
        entries = [e for e in entries if e.task == task]
    if sessions is not None:
        wanted = set(sessions)
        entries = [e for e in entries if e.session in wanted]
    tasks = {e.task for e in entries}
    if task is None and len(tasks) > 1:
        raise IngestError("manifest mixes fixed- and free-text files; select one task")
    source = None
    if tasks:
        source = Source.BUFFALO_FREE if tasks == {1} else Source.BUFFALO_FIXED

    # stable sort keeps manifest order among files of the same session
    entries = sorted(entries, key=lambda e: e.session)
    root = Path(root)
    tables = []
    for entry in entries:
        text = (root / entry.path).read_text(encoding="utf-8")
        file_report = ParseReport()
        try:
            events = parse_buffalo_events(text, file_report)
            tables.append(events_to_features(
                events, entry.subject, report=file_report,
                pause_cutoff=pause_cutoff, keep_negative_ud=keep_negative_ud,
            ))
        except (FileEmpty, NoCompletePairs) as exc:
            log.warning("skipping %s: %s", entry.path, exc)
            file_report.skipped_files.append(entry.path)
        report.merge(file_report)
    table = FeatureTable.concat(tables, source)
    if not len(table):
        raise FileEmpty(report, "manifest")
    return table


# -- Aalto -------------------------------------------------------------------


def parse_aalto(
    records: Iterable[Mapping[str, str]],
    *,
    report: ParseReport | None = None,
    pause_cutoff: float = DEFAULT_PAUSE_CUTOFF,
    keep_negative_ud: bool = False,
) -> FeatureTable:
    """Build feature rows from Aalto keystroke records.

    Pairs are formed only between consecutive keystrokes of the same test
    section. A record whose times do not parse breaks the chain at that point.
    """
    if report is None:
        report = ParseReport()
    sections: OrderedDict[tuple[str, str], list[tuple[str, int, int] | None]] = OrderedDict()
    for n, rec in enumerate(records, start=1):
        if n == 1:
            for col in AALTO_REQUIRED:
                if col not in rec:
                    raise MissingColumn(col)
        report.lines += 1
        sid = (rec["PARTICIPANT_ID"].strip(), rec["TEST_SECTION_ID"].strip())
        bucket = sections.setdefault(sid, [])
        letter = rec["LETTER"] or ""
        label = letter if letter != "" else (rec["KEYCODE"] or "").strip()
        try:
            press = int(float(rec["PRESS_TIME"]))
            release = int(float(rec["RELEASE_TIME"]))
            if not label:
                raise ValueError("no key label")
        except (TypeError, ValueError):
            report.malformed.append(n)
            bucket.append(None)
            continue
        report.events += 2
        bucket.append((label, press, release))

    rows = []
    for (participant, _), strokes in sections.items():
        for a, b in zip(strokes, strokes[1:]):
            if a is None or b is None:
                continue
            (k1, p1, r1), (k2, p2, _) = a, b
            # differences in integer ms keep full precision on epoch stamps
            row = FeatureRow(
                participant, digraph_label(k1, k2),
                (r1 - p1) / 1000.0, (p2 - r1) / 1000.0, (p2 - p1) / 1000.0,
            )
            if _keep(row, report, pause_cutoff, keep_negative_ud):
                rows.append(row)
    return FeatureTable.concat([FeatureTable(tuple(rows))], Source.AALTO)


def _sniff_reader(fh) -> csv.DictReader:
    head = fh.readline()
    fh.seek(0)
    delimiter = "\t" if head.count("\t") > head.count(",") else ","
    return csv.DictReader(fh, delimiter=delimiter)


def read_aalto_files(paths: Iterable[str | Path], **kwargs) -> FeatureTable:
    """Aalto ships one tab-separated file per participant; comma files work too."""
    tables = []
    for path in paths:
        with open(path, newline="", encoding="utf-8", errors="replace") as fh:
            tables.append(parse_aalto(_sniff_reader(fh), **kwargs))
    return FeatureTable.concat(tables, Source.AALTO)


# -- Nanglae-Bhattarakosol ---------------------------------------------------


def parse_nanglae(
    records: Iterable[Mapping[str, str]],
    *,
    report: ParseReport | None = None,
    pause_cutoff: float = DEFAULT_PAUSE_CUTOFF,
    keep_negative_ud: bool = False,
) -> FeatureTable:
    """Pass pre-extracted rows through, refusing files still in milliseconds."""
    if report is None:
        report = ParseReport()
    parsed = []
    for n, rec in enumerate(records, start=1):
        if n == 1:
            for col in CANONICAL_HEADER:
                if col not in rec:
                    raise MissingColumn(col)
        report.lines += 1
        try:
            parsed.append(FeatureRow(
                rec["subject"].strip(), rec["key"],
                float(rec["H"]), float(rec["UD"]), float(rec["DD"]),
            ))
        except (AttributeError, TypeError, ValueError):
            report.malformed.append(n)
    if not parsed:
        raise FileEmpty(report)
    median_h = statistics.median(r.H for r in parsed)
    if median_h > NANGLAE_MS_MEDIAN_H:
        raise UnitSuspicion(median_h)
    rows = [r for r in parsed if _keep(r, report, pause_cutoff, keep_negative_ud)]
    return FeatureTable.concat([FeatureTable(tuple(rows))], Source.NANGLAE)


def read_nanglae_files(paths: Iterable[str | Path], **kwargs) -> FeatureTable:
    """Merge several exported sheets into one table."""
    records: list[dict[str, str]] = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            records.extend(csv.DictReader(fh))
    return parse_nanglae(records, **kwargs)


# -- canonical CSV -----------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.9f}"


def format_canonical_csv(table: FeatureTable) -> str:
    buf = io.StringIO()
    _write_rows(buf, table.rows)
    return buf.getvalue()


def _write_rows(fh, rows: Iterable[FeatureRow]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CANONICAL_HEADER)
    for r in rows:
        writer.writerow((r.subject, r.key, _fmt(r.H), _fmt(r.UD), _fmt(r.DD)))


def write_canonical_csv(table: FeatureTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _write_rows(fh, table.rows)


def _iter_canonical(fh) -> Iterator[FeatureRow]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(header) != CANONICAL_HEADER:
        raise HeaderMismatch(f"expected header {','.join(CANONICAL_HEADER)}, got {header}")
    for line_no, rec in enumerate(reader, start=2):
        if len(rec) != 5:
            raise IngestError(f"line {line_no}: expected 5 fields, got {len(rec)}")
        yield FeatureRow(rec[0], rec[1], float(rec[2]), float(rec[3]), float(rec[4]))


def read_canonical_csv(path: str | Path, source: Source | None = None) -> FeatureTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = tuple(_iter_canonical(fh))
    return FeatureTable(rows, source)


def parse_canonical_csv(text: str, source: Source | None = None) -> FeatureTable:
    return FeatureTable(tuple(_iter_canonical(io.StringIO(text))), source)
