"""Tabular event data: loading, synthesis, and grouping into traces.

An :class:`EventTable` is a raw grid of text attributes. Any choice of
case / activity / resource columns (a :class:`ColumnMapping`) turns the same
table into a different :class:`EventLog`, which is what lets the agent look at
the data from several perspectives.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class EventLogError(ValueError):
    """Raised for malformed tables, mappings or synthesis specs."""


@dataclass(frozen=True)
class EventTable:
    column_names: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        names = tuple(self.column_names)
        rows = tuple(tuple(r) for r in self.rows)
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "rows", rows)
        if len(names) < 3:
            raise EventLogError(f"an event table needs at least 3 columns, got {len(names)}")
        if len(set(names)) != len(names):
            raise EventLogError(f"duplicate column names: {names}")
        for i, row in enumerate(rows):
            if len(row) != len(names):
                raise EventLogError(
                    f"row {i} has {len(row)} values, expected {len(names)}")

    @property
    def n_columns(self) -> int:
        return len(self.column_names)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class ColumnMapping:
    case_col: int
    activity_col: int
    resource_col: int
    timestamp_col: Optional[int] = None

    def validate(self, n_columns: int) -> None:
        roles = [self.case_col, self.activity_col, self.resource_col]
        if len(set(roles)) != 3:
            raise EventLogError(f"case/activity/resource columns must be distinct: {roles}")
        if self.timestamp_col is not None:
            roles.append(self.timestamp_col)
        for idx in roles:
            if not 0 <= idx < n_columns:
                raise EventLogError(
                    f"column index {idx} out of range for {n_columns} columns")


@dataclass(frozen=True)
class Event:
    activity: str
    resource: str
    timestamp: Optional[str] = None


@dataclass(frozen=True)
class Trace:
    case_id: str
    events: tuple[Event, ...]

    @property
    def activities(self) -> tuple[str, ...]:
        return tuple(e.activity for e in self.events)

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class EventLog:
    traces: tuple[Trace, ...]
    alphabet: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.traces)

    @property
    def n_events(self) -> int:
        return sum(len(t) for t in self.traces)


def load_table(path, delimiter: str = ",", has_header: bool = True) -> EventTable:
    """Read a delimiter-separated UTF-8 file into an :class:`EventTable`.

    Blank lines are skipped. Without a header the columns are named
    ``col_0 .. col_{n-1}``.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            records = [r for r in csv.reader(fh, delimiter=delimiter) if r]
    except OSError as exc:
        raise EventLogError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise EventLogError(f"{path} is not valid UTF-8: {exc}") from exc
    if not records:
        raise EventLogError(f"{path} is empty")

    if has_header:
        names, body, first_line = records[0], records[1:], 2
    else:
        names = [f"col_{i}" for i in range(len(records[0]))]
        body, first_line = records, 1
    if len(names) < 3:
        raise EventLogError(f"{path}: need at least 3 columns, found {len(names)}")
    for i, row in enumerate(body):
        if len(row) != len(names):
            raise EventLogError(
                f"{path}: ragged row {first_line + i} has {len(row)} values, "
                f"expected {len(names)}")
    return EventTable(tuple(names), tuple(tuple(r) for r in body))


def write_table(table: EventTable, path, delimiter: str = ",") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(table.column_names)
        writer.writerows(table.rows)


def build_log(table: EventTable, mapping: ColumnMapping) -> EventLog:
    """Group table rows into traces under ``mapping``.

    Cases appear in order of first occurrence. Within a case events keep row
    order, or are stably sorted by the raw timestamp text when a timestamp
    column is mapped.
    """
    mapping.validate(table.n_columns)
    c, a, r, ts = mapping.case_col, mapping.activity_col, mapping.resource_col, mapping.timestamp_col

    grouped: dict[str, list[Event]] = {}
    for row in table.rows:
        ev = Event(row[a], row[r], row[ts] if ts is not None else None)
        grouped.setdefault(row[c], []).append(ev)

    traces = []
    for case_id, events in grouped.items():
        if ts is not None:
            events = sorted(events, key=lambda e: e.timestamp)
        traces.append(Trace(case_id, tuple(events)))

    alphabet = dict.fromkeys(e.activity for t in traces for e in t.events)
    return EventLog(tuple(traces), tuple(alphabet))


def log_from_sequences(sequences: Sequence[Sequence[str]]) -> EventLog:
    """Convenience constructor used by tests and examples: one trace per sequence."""
    traces = tuple(
        Trace(f"c{i}", tuple(Event(act, "") for act in seq))
        for i, seq in enumerate(sequences) if len(seq) > 0)
    alphabet = dict.fromkeys(act for t in traces for act in t.activities)
    return EventLog(traces, tuple(alphabet))


# --------------------------------------------------------------------------
# Synthetic tables

@dataclass(frozen=True)
class SynthSpec:
    """Ground truth for :func:`generate_synthetic_table`.

    ``sequence`` lists process steps in order. A step is either one activity
    or several alternatives written ``"B|C"``; alternatives can carry weights
    as ``"B:0.7|C:0.3"`` (uniform otherwise).
    """
    n_cases: int
    sequence: tuple[str, ...]
    n_noise_columns: int = 0
    noise_rate: float = 0.0
    n_resources: int = 4
    noise_cardinality: int = 4
    overlap: float = 4.0
    planted: ColumnMapping = field(default=ColumnMapping(0, 1, 2), init=False)

    def validate(self) -> None:
        if self.n_cases < 1:
            raise EventLogError(f"n_cases must be >= 1, got {self.n_cases}")
        if not self.sequence:
            raise EventLogError("sequence must contain at least one step")
        if self.n_noise_columns < 0:
            raise EventLogError(f"n_noise_columns must be >= 0, got {self.n_noise_columns}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise EventLogError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")
        if self.n_resources < 1 or self.noise_cardinality < 1:
            raise EventLogError("n_resources and noise_cardinality must be >= 1")
        if self.overlap < 0:
            raise EventLogError(f"overlap must be >= 0, got {self.overlap}")
        parse_steps(self.sequence)

    def column_names(self) -> tuple[str, ...]:
        return ("case_id", "activity", "resource") + tuple(
            f"attr_{i + 1}" for i in range(self.n_noise_columns))


def parse_steps(sequence: Sequence[str]) -> list[tuple[list[str], np.ndarray]]:
    steps = []
    for token in sequence:
        names, weights = [], []
        for alt in token.split("|"):
            name, _, w = alt.strip().partition(":")
            if not name:
                raise EventLogError(f"empty activity in step {token!r}")
            try:
                weight = float(w) if w else 1.0
            except ValueError:
                raise EventLogError(f"bad branch weight in step {token!r}") from None
            if weight <= 0:
                raise EventLogError(f"branch weights must be positive in step {token!r}")
            names.append(name)
            weights.append(weight)
        p = np.asarray(weights, dtype=float)
        steps.append((names, p / p.sum()))
    return steps


def generate_synthetic_table(spec: SynthSpec, seed: int) -> EventTable:
    """Build a table whose columns (0, 1) replay the ground-truth process.

    Cases start at staggered times and their events are interleaved in
    timestamp order, as in a real system log; ``overlap`` is roughly how many
    cases run concurrently. Each activity value is replaced by a different
    activity with probability ``noise_rate``. Resources and the extra
    ``attr_*`` columns are drawn uniformly from small vocabularies.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    steps = parse_steps(spec.sequence)
    vocab = list(dict.fromkeys(a for names, _ in steps for a in names))
    width = len(str(spec.n_cases))

    events = []  # (time, case_no, position, activity)
    for case_no in range(spec.n_cases):
        t = rng.uniform(0.0, spec.n_cases * len(steps) / max(spec.overlap, 1e-9)) \
            if spec.overlap > 0 else case_no * (len(steps) + 1.0)
        for pos, (names, p) in enumerate(steps):
            act = names[rng.choice(len(names), p=p)] if len(names) > 1 else names[0]
            events.append((t, case_no, pos, act))
            t += rng.exponential(1.0)
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    rows = []
    for _, case_no, _, act in events:
        if spec.noise_rate > 0 and len(vocab) > 1 and rng.random() < spec.noise_rate:
            others = [v for v in vocab if v != act]
            act = others[rng.integers(len(others))]
        row = [f"C{case_no + 1:0{width}d}", act, f"R{rng.integers(spec.n_resources) + 1}"]
        row += [f"v{rng.integers(spec.noise_cardinality) + 1}" for _ in range(spec.n_noise_columns)]
        rows.append(tuple(row))
    return EventTable(spec.column_names(), tuple(rows))
