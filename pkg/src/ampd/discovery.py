"""Heuristic-miner style discovery on top of an :class:`~ampd.eventlog.EventLog`.

The model produced here is the raw thresholded dependency graph: an edge
``a -> b`` exists whenever ``dep[a][b] >= threshold``. Self-loops follow the
same rule.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .eventlog import ColumnMapping, EventLog


class DiscoveryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DirectlyFollowsMatrix:
    alphabet: tuple[str, ...]
    counts: np.ndarray            # int64, counts[i, j] = |a_i > a_j|
    activity_freq: np.ndarray     # int64, number of events per activity

    @property
    def size(self) -> int:
        return len(self.alphabet)


@dataclass(frozen=True, eq=False)
class DependencyMatrix:
    alphabet: tuple[str, ...]
    dep: np.ndarray
    df: Optional[DirectlyFollowsMatrix] = None

    @property
    def size(self) -> int:
        return len(self.alphabet)

    def index(self) -> dict[str, int]:
        return {a: i for i, a in enumerate(self.alphabet)}


@dataclass(frozen=True, eq=False)
class ProcessModel:
    alphabet: tuple[str, ...]
    edges: frozenset[tuple[str, str]]
    threshold: float
    mapping: Optional[ColumnMapping] = None
    weights: Optional[dict[tuple[str, str], float]] = None

    def has_edge(self, a: str, b: str) -> bool:
        return (a, b) in self.edges


def directly_follows_counts(log: EventLog) -> DirectlyFollowsMatrix:
    index = {a: i for i, a in enumerate(log.alphabet)}
    n = len(index)
    counts = np.zeros((n, n), dtype=np.int64)
    freq = np.zeros(n, dtype=np.int64)
    for trace in log.traces:
        ids = np.fromiter((index[e.activity] for e in trace.events), dtype=np.int64,
                          count=len(trace))
        np.add.at(freq, ids, 1)
        if len(ids) > 1:
            np.add.at(counts, (ids[:-1], ids[1:]), 1)
    return DirectlyFollowsMatrix(log.alphabet, counts, freq)


def dependency_matrix(df: DirectlyFollowsMatrix) -> DependencyMatrix:
    """Dependency measure for every ordered pair, diagonal included.

    ``dep[i, j] = (c[i, j] - c[j, i]) / (c[i, j] + c[j, i] + 1)``
    """
    c = df.counts.astype(np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DiscoveryError(f"directly-follows matrix must be square, got {c.shape}")
    dep = (c - c.T) / (c + c.T + 1.0)
    return DependencyMatrix(df.alphabet, dep, df)


def zero_dependency_matrix(alphabet=()) -> DependencyMatrix:
    n = len(alphabet)
    df = DirectlyFollowsMatrix(tuple(alphabet), np.zeros((n, n), dtype=np.int64),
                               np.zeros(n, dtype=np.int64))
    return DependencyMatrix(tuple(alphabet), np.zeros((n, n)), df)


def discover_model(depmat: DependencyMatrix, threshold: float,
                   mapping: Optional[ColumnMapping] = None) -> ProcessModel:
    if not 0.0 <= threshold <= 1.0:
        raise DiscoveryError(f"threshold must lie in [0, 1], got {threshold}")
    rows, cols = np.nonzero(depmat.dep >= threshold)
    alpha = depmat.alphabet
    weights = {(alpha[i], alpha[j]): float(depmat.dep[i, j]) for i, j in zip(rows, cols)}
    return ProcessModel(alpha, frozenset(weights), float(threshold), mapping, weights)


def discover(log: EventLog, threshold: float, mapping: Optional[ColumnMapping] = None):
    """Shortcut: log -> dependency matrix -> model. Returns ``(depmat, model)``."""
    depmat = dependency_matrix(directly_follows_counts(log))
    return depmat, discover_model(depmat, threshold, mapping)


# --------------------------------------------------------------------------
# Fuzzy-miner metrics

def fuzzy_relative_significance(df: DirectlyFollowsMatrix) -> np.ndarray:
    """Relative edge significance with directly-follows counts as significance.

    Each half of the score is normalised by the source row sum or the target
    column sum; a half whose sum is zero contributes 0.
    """
    sig = np.asarray(df.counts, dtype=np.float64)
    out_sum = sig.sum(axis=1, keepdims=True)
    in_sum = sig.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        by_row = np.where(out_sum > 0, sig / out_sum, 0.0)
        by_col = np.where(in_sum > 0, sig / in_sum, 0.0)
    return 0.5 * by_row + 0.5 * by_col


def fuzzy_utility(sig, cor, ur: float):
    if not 0.0 <= ur <= 1.0:
        raise DiscoveryError(f"utility ratio must lie in [0, 1], got {ur}")
    return ur * sig + (1.0 - ur) * cor


def max_normalized_correlation(df: DirectlyFollowsMatrix) -> np.ndarray:
    """Default edge correlation: counts scaled by the largest count.

    This is a stand-in; swap it through the ``correlation`` argument of
    :func:`fuzzy_utility_matrix`.
    """
    c = np.asarray(df.counts, dtype=np.float64)
    peak = c.max() if c.size else 0.0
    return c / peak if peak > 0 else np.zeros_like(c)


def fuzzy_utility_matrix(df: DirectlyFollowsMatrix, ur: float,
                         correlation: Callable[[DirectlyFollowsMatrix], np.ndarray]
                         = max_normalized_correlation) -> np.ndarray:
    return fuzzy_utility(fuzzy_relative_significance(df), correlation(df), ur)


# --------------------------------------------------------------------------
# DOT export / import

def _quote(name: str) -> str:
    return '"' + name.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(model: ProcessModel, name: str = "process_model") -> str:
    lines = [f"digraph {name} {{"]
    meta = [f"threshold={model.threshold:g}"]
    if model.mapping is not None:
        m = model.mapping
        meta += [f"case={m.case_col}", f"activity={m.activity_col}", f"resource={m.resource_col}"]
    lines.append("  // " + " ".join(meta))
    for a in model.alphabet:
        lines.append(f"  {_quote(a)};")
    order = {a: i for i, a in enumerate(model.alphabet)}
    for a, b in sorted(model.edges, key=lambda e: (order[e[0]], order[e[1]])):
        w = (model.weights or {}).get((a, b))
        attr = f' [label="{w:.3f}"]' if w is not None else ""
        lines.append(f"  {_quote(a)} -> {_quote(b)}{attr};")
    lines.append("}")
    return "\n".join(lines) + "\n"


_QS = r'"((?:[^"\\]|\\.)*)"'
_NODE_RE = re.compile(rf"^{_QS}\s*;?$")
_EDGE_RE = re.compile(rf'^{_QS}\s*->\s*{_QS}\s*(?:\[\s*label\s*=\s*"([^"]*)"\s*\])?\s*;?$')
_HEAD_RE = re.compile(r"^digraph\s+(\w+\s*)?\{$")
_META_RE = re.compile(r"(\w+)=(\S+)")


def _unquote(s: str) -> str:
    return re.sub(r"\\(.)", r"\1", s)


def read_dot(text: str) -> ProcessModel:
    """Parse the DOT subset written by :func:`export_dot`.

    Anything else (subgraphs, attribute statements, undirected edges) is
    rejected with the offending line number.
    """
    alphabet: dict[str, None] = {}
    weights: dict[tuple[str, str], float] = {}
    edges = set()
    meta: dict[str, str] = {}
    state = "head"
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if state == "head":
            if not _HEAD_RE.match(line):
                raise DiscoveryError(f"line {lineno}: expected 'digraph <name> {{', got {raw!r}")
            state = "body"
            continue
        if state == "done":
            raise DiscoveryError(f"line {lineno}: content after closing brace")
        if line == "}":
            state = "done"
        elif line.startswith("//"):
            meta.update(_META_RE.findall(line))
        elif m := _EDGE_RE.match(line):
            a, b = _unquote(m.group(1)), _unquote(m.group(2))
            alphabet.setdefault(a)
            alphabet.setdefault(b)
            edges.add((a, b))
            if m.group(3) is not None:
                try:
                    weights[(a, b)] = float(m.group(3))
                except ValueError:
                    raise DiscoveryError(f"line {lineno}: bad edge label {m.group(3)!r}") from None
        elif m := _NODE_RE.match(line):
            alphabet.setdefault(_unquote(m.group(1)))
        else:
            raise DiscoveryError(f"line {lineno}: unsupported statement {raw.strip()!r}")
    if state != "done":
        raise DiscoveryError("missing closing brace")

    mapping = None
    try:
        threshold = float(meta.get("threshold", "0"))
        if {"case", "activity", "resource"} <= meta.keys():
            mapping = ColumnMapping(int(meta["case"]), int(meta["activity"]), int(meta["resource"]))
    except ValueError as exc:
        raise DiscoveryError(f"bad metadata comment: {exc}") from None
    return ProcessModel(tuple(alphabet), frozenset(edges), threshold, mapping, weights or None)
