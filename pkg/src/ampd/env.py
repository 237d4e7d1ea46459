"""Discovery environment for the Q-learning agent.

An action picks a dependency threshold plus the case / activity / resource
columns. Stepping the environment mines the table under that mapping and
scores the resulting model; the next state is the dependency matrix that was
mined. The next state depends only on the action, never on the current
state, so the environment behaves like a contextual bandit.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .conformance import log_fitness
from .discovery import (DependencyMatrix, ProcessModel, dependency_matrix,
                        directly_follows_counts, discover_model, zero_dependency_matrix)
from .eventlog import ColumnMapping, EventTable, build_log

REWARD_MODES = ("fitness_only", "fitness_plus_std", "matrix_mean_plus_std")
STATE_SIDE = 128


class EnvError(ValueError):
    pass


def threshold_grid(start: float = 0.01, stop: float = 1.0, step: float = 0.01) -> tuple[float, ...]:
    """Inclusive, evenly spaced grid, rounded to kill float drift (0.01*3 -> 0.03)."""
    if step <= 0:
        raise EnvError(f"grid step must be positive, got {step}")
    n = int(round((stop - start) / step)) + 1
    if n < 1:
        raise EnvError(f"empty grid: start={start} stop={stop} step={step}")
    return tuple(round(start + i * step, 10) for i in range(n))


@dataclass(frozen=True)
class Action:
    threshold: float
    case_col: int
    activity_col: int
    resource_col: int
    index: int

    def __post_init__(self):
        if len({self.case_col, self.activity_col, self.resource_col}) != 3:
            raise EnvError(f"action columns must be distinct: {self.columns}")

    @property
    def columns(self) -> tuple[int, int, int]:
        return self.case_col, self.activity_col, self.resource_col

    @property
    def mapping(self) -> ColumnMapping:
        return ColumnMapping(self.case_col, self.activity_col, self.resource_col)

    def display(self) -> str:
        """1-based rendering, e.g. ``<0.01, 1, 2, 3>`` for the first action."""
        c, a, r = (x + 1 for x in self.columns)
        return f"<{self.threshold:.2f}, {c}, {a}, {r}>"


class ActionSpace:
    """All ``(threshold, case, activity, resource)`` tuples in a fixed order.

    Thresholds form the outer loop; the inner loop walks column triples
    ``i < j < k`` lexicographically and assigns ``case=i, activity=j,
    resource=k``. With ``permutations=True`` every ordering of each triple
    is used instead.
    """

    def __init__(self, n_columns: int, param_grid: Sequence[float], permutations: bool = False):
        grid = tuple(float(g) for g in param_grid)
        if n_columns < 3:
            raise EnvError(f"need at least 3 columns, got {n_columns}")
        if not grid:
            raise EnvError("parameter grid is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise EnvError("parameter grid must be strictly ascending")
        if grid[0] < 0 or grid[-1] > 1:
            raise EnvError("grid thresholds must lie in [0, 1]")
        self.n_columns = n_columns
        self.param_grid = grid
        self.permutations = permutations
        if permutations:
            self.column_triples = list(itertools.permutations(range(n_columns), 3))
        else:
            self.column_triples = list(itertools.combinations(range(n_columns), 3))
        self._triple_pos = {t: i for i, t in enumerate(self.column_triples)}
        self._grid_pos = {g: i for i, g in enumerate(grid)}
        n_triples = len(self.column_triples)
        self.actions = [
            Action(g, *triple, index=gi * n_triples + ti)
            for gi, g in enumerate(grid)
            for ti, triple in enumerate(self.column_triples)
        ]

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, index: int) -> Action:
        return self.actions[index]

    def __iter__(self):
        return iter(self.actions)

    def encode(self, threshold: float, case_col: int, activity_col: int, resource_col: int) -> int:
        try:
            gi = self._grid_pos[float(threshold)]
            ti = self._triple_pos[(case_col, activity_col, resource_col)]
        except KeyError:
            raise EnvError(
                f"no such action: {(threshold, case_col, activity_col, resource_col)}") from None
        return gi * len(self.column_triples) + ti

    def decode(self, index: int) -> tuple[float, int, int, int]:
        a = self.actions[index]
        return (a.threshold, *a.columns)


def build_action_space(n_columns: int, param_grid: Sequence[float],
                       permutations: bool = False) -> ActionSpace:
    return ActionSpace(n_columns, param_grid, permutations)


@dataclass(frozen=True)
class EnvConfig:
    param_grid: tuple[float, ...] = threshold_grid()
    min_fitness: float = 0.7
    reward_mode: str = "fitness_plus_std"
    max_alphabet: int = STATE_SIDE
    permutations: bool = False

    def __post_init__(self):
        if self.reward_mode not in REWARD_MODES:
            raise EnvError(f"unknown reward_mode {self.reward_mode!r}; choose from {REWARD_MODES}")
        if not 0.0 <= self.min_fitness <= 1.0:
            raise EnvError(f"min_fitness must lie in [0, 1], got {self.min_fitness}")
        if self.max_alphabet < 1:
            raise EnvError("max_alphabet must be positive")


# --------------------------------------------------------------------------
# State

def encode_state(depmat: DependencyMatrix, side: int = STATE_SIDE) -> np.ndarray:
    """Pack a dependency matrix into a ``side x side x 3`` array.

    Channel 0 holds dependency values, channel 1 row-normalised and channel 2
    column-normalised directly-follows counts. Larger alphabets keep the
    ``side`` most frequent activities (ties by alphabet order).
    """
    out = np.zeros((side, side, 3), dtype=np.float64)
    n = depmat.size
    if n == 0:
        return out
    df = depmat.df
    if n > side:
        freq = df.activity_freq if df is not None else np.zeros(n)
        keep = np.sort(np.argsort(-freq, kind="stable")[:side])
    else:
        keep = np.arange(n)
    k = len(keep)
    out[:k, :k, 0] = depmat.dep[np.ix_(keep, keep)]
    if df is not None:
        counts = df.counts[np.ix_(keep, keep)].astype(np.float64)
        rows = counts.sum(axis=1, keepdims=True)
        cols = counts.sum(axis=0, keepdims=True)
        out[:k, :k, 1] = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
        out[:k, :k, 2] = np.divide(counts, cols, out=np.zeros_like(counts), where=cols > 0)
    return out


class EnvState:
    """A dependency matrix plus its (lazily built) network encoding."""

    def __init__(self, depmat: DependencyMatrix, side: int = STATE_SIDE):
        self.depmat = depmat
        self.side = side

    @cached_property
    def tensor(self) -> np.ndarray:
        t = encode_state(self.depmat, self.side)
        t.flags.writeable = False
        return t


def initial_state(side: int = STATE_SIDE) -> EnvState:
    return EnvState(zero_dependency_matrix(), side)


# --------------------------------------------------------------------------
# Step / reward

def compute_reward(fitness: float, depmat: DependencyMatrix, mode: str = "fitness_plus_std") -> float:
    values = np.asarray(depmat.dep, dtype=np.float64)
    std = float(values.std()) if values.size else 0.0
    if mode == "fitness_only":
        return float(fitness)
    if mode == "fitness_plus_std":
        return float(fitness) + std
    if mode == "matrix_mean_plus_std":
        return (float(values.mean()) if values.size else 0.0) + std
    raise EnvError(f"unknown reward mode {mode!r}; choose from {REWARD_MODES}")


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    fitness: float
    reward: float
    success: bool
    model: ProcessModel


def env_step(table: EventTable, action: Action, config: EnvConfig = EnvConfig()) -> StepOutcome:
    for col in action.columns:
        if not 0 <= col < table.n_columns:
            raise EnvError(f"action column {col} out of range for {table.n_columns} columns")
    mapping = action.mapping
    log = build_log(table, mapping)
    depmat = dependency_matrix(directly_follows_counts(log))
    model = discover_model(depmat, action.threshold, mapping)
    fitness = log_fitness(log, model).log_fitness
    reward = compute_reward(fitness, depmat, config.reward_mode)
    return StepOutcome(EnvState(depmat, config.max_alphabet), fitness, reward,
                       fitness > config.min_fitness, model)
