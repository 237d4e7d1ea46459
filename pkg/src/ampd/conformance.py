"""Replay fitness of a log against a dependency-graph model.

Fitness is directly-follows coverage: the share of adjacent activity pairs in
the log that the model has an edge for. Traces with a single event (and empty
logs) count as perfectly fitting.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .discovery import ProcessModel
from .eventlog import EventLog, Trace


class ConformanceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceFitness:
    case_id: str
    fitness: float
    matched: int
    total: int


@dataclass(frozen=True)
class FitnessReport:
    log_fitness: float
    per_trace: tuple[TraceFitness, ...]
    vacuous: bool = False    # no adjacent pairs anywhere; fitness 1 by convention

    def write_csv(self, path, delimiter: str = ",") -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            w.writerow(["case_id", "trace_fitness", "matched", "total"])
            for t in self.per_trace:
                w.writerow([t.case_id, f"{t.fitness:.6f}", t.matched, t.total])


def _replay(trace: Trace, model: ProcessModel) -> tuple[int, int]:
    acts = trace.activities
    matched = sum(1 for a, b in zip(acts, acts[1:]) if (a, b) in model.edges)
    return matched, len(acts) - 1


def trace_fitness(trace: Trace, model: ProcessModel) -> float:
    if len(trace) == 0:
        raise ConformanceError(f"trace {trace.case_id!r} is empty")
    matched, total = _replay(trace, model)
    return matched / total if total else 1.0


def log_fitness(log: EventLog, model: ProcessModel) -> FitnessReport:
    per_trace = []
    matched_sum = total_sum = 0
    for trace in log.traces:
        if len(trace) == 0:
            raise ConformanceError(f"trace {trace.case_id!r} is empty")
        matched, total = _replay(trace, model)
        per_trace.append(TraceFitness(trace.case_id, matched / total if total else 1.0,
                                      matched, total))
        matched_sum += matched
        total_sum += total
    if total_sum == 0:
        return FitnessReport(1.0, tuple(per_trace), vacuous=True)
    return FitnessReport(matched_sum / total_sum, tuple(per_trace))
