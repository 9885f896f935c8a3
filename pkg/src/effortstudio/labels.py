"""Sparse categorical labels over window starts, plus the two expansion rules.

Tables are immutable snapshots: every mutation returns a new table. The CSV
store is an append-only log replayed with the same precedence rules used
in memory (manual beats augmented, augmented never overwrites), so saving
and reloading reproduces a table exactly.

Expansion rules:

* between-fill - window starts strictly between two same-label manual
  records whose gap is at most the window length contain only poses from
  the labeled pair, so they inherit the label.
* dilation - every manual or between-filled record extends to window
  starts within a frame radius. Dilated records are not re-dilated, which
  is what makes the rule idempotent.
"""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

from .errors import ConflictError, ParseError, PreconditionError, SchemaError
from .motiondata import Sequence

CSV_HEADER = ["clip_id", "start_frame", "seq_len", "label", "source", "created_at"]
SOURCES = ("manual", "between-fill", "dilation")
DEFAULT_NAMES_K3 = ("Low", "Medium", "High")

# Fixed timestamps keep synthetic and legacy-import tables byte-reproducible.
SYNTH_TIMESTAMP = "2000-01-01T00:00:00+00:00"
LEGACY_TIMESTAMP = "1970-01-01T00:00:00+00:00"


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def default_class_names(k: int) -> tuple[str, ...]:
    if k == 3:
        return DEFAULT_NAMES_K3
    return tuple(f"class-{i}" for i in range(k))


@dataclass(frozen=True)
class EffortLabel:
    value: int
    k: int = 3

    def __post_init__(self):
        if not 0 <= self.value < self.k:
            raise PreconditionError(f"label value {self.value} outside [0, {self.k})")


@dataclass(frozen=True)
class LabelRecord:
    clip_id: str
    start_frame: int
    seq_len: int
    label: EffortLabel
    source: str = "manual"
    created_at: str = ""

    def __post_init__(self):
        if self.source not in SOURCES:
            raise SchemaError(f"unknown label source {self.source!r}")
        if self.start_frame < 0:
            raise SchemaError(f"negative start frame {self.start_frame}")
        if self.seq_len < 2:
            raise SchemaError(f"sequence length {self.seq_len} too short")
        if not self.created_at:
            object.__setattr__(self, "created_at", now_iso())

    @property
    def key(self) -> tuple[str, int]:
        return (self.clip_id, self.start_frame)

    @property
    def window_id(self) -> str:
        return f"{self.clip_id}:{self.start_frame}"


@dataclass(frozen=True)
class Histogram:
    counts: tuple[int, ...]
    fractions: tuple[float, ...] | None  # None when the table is empty


class LabelTable:
    """Immutable snapshot of records keyed by (clip_id, start_frame)."""

    def __init__(self, k: int, records: dict[tuple[str, int], LabelRecord] | None = None,
                 class_names: tuple[str, ...] | None = None, conflict_policy: str = "error"):
        if k < 1:
            raise PreconditionError("k must be at least 1")
        if conflict_policy not in ("error", "overwrite"):
            raise PreconditionError(f"unknown conflict policy {conflict_policy!r}")
        self.k = k
        self.class_names = class_names or default_class_names(k)
        self.conflict_policy = conflict_policy
        self._records: dict[tuple[str, int], LabelRecord] = dict(records or {})

    # -- construction --------------------------------------------------

    @classmethod
    def from_records(cls, records, k: int, **kwargs) -> "LabelTable":
        table = cls(k=k, **kwargs)
        for record in records:
            table = save_label(table, record, overwrite=True)
        return table

    def _copy_with(self, records: dict[tuple[str, int], LabelRecord]) -> "LabelTable":
        return LabelTable(self.k, records, self.class_names, self.conflict_policy)

    # -- access ---------------------------------------------------------

    def get(self, clip_id: str, start_frame: int) -> LabelRecord | None:
        return self._records.get((clip_id, start_frame))

    def records(self) -> list[LabelRecord]:
        return [self._records[key] for key in sorted(self._records)]

    def __len__(self) -> int:
        return len(self._records)

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelTable) and self.k == other.k and self._records == other._records

    def labeled_ids(self) -> set[str]:
        return {r.window_id for r in self._records.values()}

    def seq_len(self) -> int | None:
        lengths = {r.seq_len for r in self._records.values()}
        if not lengths:
            return None
        if len(lengths) > 1:
            raise SchemaError(f"mixed sequence lengths in table: {sorted(lengths)}")
        return lengths.pop()

    def source_counts(self) -> dict[str, int]:
        out = {s: 0 for s in SOURCES}
        for r in self._records.values():
            out[r.source] += 1
        return out

    # -- persistence ------------------------------------------------------

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for record in self.records():
                writer.writerow(_csv_row(record))
        return path

    @classmethod
    def from_csv(cls, path: str | Path, k: int, **kwargs) -> "LabelTable":
        return cls.from_records(read_label_csv(path, k), k=k, **kwargs)


def _csv_row(record: LabelRecord) -> list:
    return [record.clip_id, record.start_frame, record.seq_len,
            record.label.value, record.source, record.created_at]


def read_label_csv(path: str | Path, k: int) -> list[LabelRecord]:
    """Read a label CSV; legacy files without a ``source`` column import as manual."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        legacy = header == CSV_HEADER[:4]
        if not legacy and header != CSV_HEADER:
            raise ParseError(f"{path}: unexpected header {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                record = LabelRecord(
                    clip_id=row[0],
                    start_frame=int(row[1]),
                    seq_len=int(row[2]),
                    label=EffortLabel(int(row[3]), k),
                    source="manual" if legacy else row[4],
                    created_at=LEGACY_TIMESTAMP if legacy else row[5],
                )
            except (IndexError, ValueError, PreconditionError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            records.append(record)
    return records


# ---------------------------------------------------------------------------
# mutation


def save_label(table: LabelTable, record: LabelRecord, overwrite: bool | None = None) -> LabelTable:
    """Insert one record under the precedence rules; returns a new snapshot.

    Manual labels replace augmented ones at the same key; augmented labels
    never overwrite anything. A manual label conflicting with an existing
    manual label of a different value raises unless ``overwrite`` (or the
    table's policy) says otherwise.
    """
    if record.label.k != table.k:
        raise SchemaError(f"record k={record.label.k} does not match table k={table.k}")
    if overwrite is None:
        overwrite = table.conflict_policy == "overwrite"
    existing = table.get(*record.key)
    if existing is None:
        records = dict(table._records)
        records[record.key] = record
        return table._copy_with(records)
    if record.source != "manual":
        return table  # augmented labels never overwrite
    if existing.source == "manual":
        if existing.label == record.label:
            return table
        if not overwrite:
            raise ConflictError(
                f"manual label already present at {record.key} "
                f"(existing {existing.label.value}, new {record.label.value})"
            )
    records = dict(table._records)
    records[record.key] = record
    return table._copy_with(records)


def _window_starts(windows: list[Sequence]) -> dict[str, list[int]]:
    by_clip: dict[str, set[int]] = {}
    for w in windows:
        by_clip.setdefault(w.clip_id, set()).add(w.start_frame)
    return {clip: sorted(starts) for clip, starts in by_clip.items()}


def augment_between(table: LabelTable, windows: list[Sequence]) -> LabelTable:
    """Fill window starts strictly between same-label manual pairs with gap <= T."""
    seq_len = table.seq_len()
    if seq_len is None:
        return table
    starts_by_clip = _window_starts(windows)
    manual = sorted(
        (r for r in table.records() if r.source == "manual"),
        key=lambda r: (r.clip_id, r.start_frame),
    )
    by_clip: dict[str, list[LabelRecord]] = {}
    for r in manual:
        by_clip.setdefault(r.clip_id, []).append(r)
    records = dict(table._records)
    for clip_id, clip_records in by_clip.items():
        starts = starts_by_clip.get(clip_id, [])
        for i, first in enumerate(clip_records):
            for second in clip_records[i + 1 :]:
                if second.start_frame > first.start_frame + seq_len:
                    break  # sorted: later records only get farther away
                if second.label != first.label:
                    continue
                for s in starts:
                    if first.start_frame < s < second.start_frame and (clip_id, s) not in records:
                        records[(clip_id, s)] = replace(
                            first, start_frame=s, source="between-fill"
                        )
    return table._copy_with(records)


def augment_dilate(table: LabelTable, windows: list[Sequence], radius: int) -> LabelTable:
    """Copy manual and between-filled labels to window starts within +-radius.

    Dilation-sourced records never act as sources, so reapplying at the
    same radius is a no-op rather than a creeping expansion.
    """
    if radius < 0:
        raise PreconditionError("radius must be nonnegative")
    starts_by_clip = _window_starts(windows)
    start_sets = {clip: set(starts) for clip, starts in starts_by_clip.items()}
    sources = [r for r in table.records() if r.source in ("manual", "between-fill")]
    records = dict(table._records)
    for record in sources:
        valid = start_sets.get(record.clip_id, set())
        for offset in range(-radius, radius + 1):
            s = record.start_frame + offset
            if s in valid and (record.clip_id, s) not in records:
                records[(record.clip_id, s)] = replace(record, start_frame=s, source="dilation")
    return table._copy_with(records)


def class_histogram(table: LabelTable) -> Histogram:
    counts = [0] * table.k
    for record in table.records():
        counts[record.label.value] += 1
    total = sum(counts)
    if total == 0:
        return Histogram(counts=tuple(counts), fractions=None)
    return Histogram(counts=tuple(counts), fractions=tuple(c / total for c in counts))


def thin_labels(table: LabelTable, fraction: float, min_gap: int, seed: int) -> LabelTable:
    """Keep roughly ``fraction`` of records, spaced at least ``min_gap`` apart.

    Mirrors a human labeling pass over windows that share no poses: within
    each clip, randomly accept records whose start is at least ``min_gap``
    from every already-accepted start, until the per-clip quota is met.
    """
    from .diffcore.rng import RngStream

    if not 0 < fraction <= 1:
        raise PreconditionError("fraction must lie in (0, 1]")
    rng = RngStream(seed)
    by_clip: dict[str, list[LabelRecord]] = {}
    for r in table.records():
        by_clip.setdefault(r.clip_id, []).append(r)
    kept: list[LabelRecord] = []
    for clip_id in sorted(by_clip):
        clip_records = by_clip[clip_id]
        quota = max(1, round(fraction * len(clip_records)))
        order = rng.permutation(len(clip_records))
        accepted: list[int] = []
        chosen: list[LabelRecord] = []
        for idx in order:
            record = clip_records[int(idx)]
            if all(abs(record.start_frame - s) >= min_gap for s in accepted):
                accepted.append(record.start_frame)
                chosen.append(record)
                if len(chosen) >= quota:
                    break
        kept.extend(chosen)
    return LabelTable.from_records(kept, k=table.k, class_names=table.class_names)


# ---------------------------------------------------------------------------
# CSV-backed store with a serialized writer


class LabelStore:
    """Append-only CSV log of labels behind a single-writer lock.

    Reads hand out the current immutable snapshot; writes append one CSV row
    and swap in the next snapshot atomically under the lock.
    """

    def __init__(self, path: str | Path, k: int, class_names: tuple[str, ...] | None = None):
        self.path = Path(path)
        self.k = k
        self._lock = threading.Lock()
        if self.path.exists():
            self._table = LabelTable.from_csv(self.path, k=k, class_names=class_names)
        else:
            self._table = LabelTable(k=k, class_names=class_names)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow(CSV_HEADER)

    @property
    def table(self) -> LabelTable:
        return self._table

    def append(self, record: LabelRecord, overwrite: bool = False) -> bool:
        """Persist one record; returns False when precedence made it a no-op."""
        with self._lock:
            updated = save_label(self._table, record, overwrite=overwrite)
            changed = updated.get(*record.key) is not self._table.get(*record.key)
            if changed:
                buffer = io.StringIO()
                csv.writer(buffer, lineterminator="\n").writerow(_csv_row(record))
                with open(self.path, "a", newline="", encoding="utf-8") as fh:
                    fh.write(buffer.getvalue())
                self._table = updated
            return changed
