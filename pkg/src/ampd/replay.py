"""Experience replay: uniform, prioritized, and the dual success/failure buffer.

The dual buffer (``dered`` strategy) stores successes and failures apart,
samples them in a fixed balance (over-sampling the success side, which is
usually the minority) and can "distort" a sampled batch by swapping the action
of a random subset of experiences for a uniformly drawn one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Optional, Sequence

import numpy as np

DISTORTION_MODES = ("ratio_draw", "per_experience")


class ReplayError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Experience:
    state: Any
    action_index: int
    reward: float
    next_state: Any
    fitness: float
    success: bool
    terminal: bool = True

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ReplayError(f"fitness must lie in [0, 1], got {self.fitness}")


class RingBuffer:
    """Fixed-capacity store; once full, each append overwrites the oldest item."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ReplayError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: list = []
        self._next = 0

    def append(self, item) -> int:
        """Store ``item`` and return the slot it went into."""
        slot = self._next
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[slot] = item
        self._next = (slot + 1) % self.capacity
        return slot

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, slot: int):
        return self._items[slot]

    def __iter__(self):
        return iter(self._items)

    def chronological(self) -> list:
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[:self._next]


def sample_uniform(buffer: Sequence, n: int, rng: np.random.Generator) -> list:
    """``n`` draws with replacement, each slot equally likely."""
    if len(buffer) == 0:
        raise ReplayError("cannot sample from an empty buffer")
    return [buffer[i] for i in rng.integers(len(buffer), size=n)]


# --------------------------------------------------------------------------
# Dual buffer

class DualReplayBuffer:
    def __init__(self, capacity: int = 10_000, min_fitness: float = 0.7):
        self.success = RingBuffer(capacity)
        self.failure = RingBuffer(capacity)
        self.capacity = capacity
        self.min_fitness = min_fitness

    def __len__(self) -> int:
        return len(self.success) + len(self.failure)


def store_experience(buffer: DualReplayBuffer, exp: Experience) -> None:
    success = exp.fitness > buffer.min_fitness
    if success != exp.success:
        raise ReplayError(
            f"experience flagged success={exp.success} but fitness {exp.fitness} "
            f"vs min_fitness {buffer.min_fitness} says {success}")
    (buffer.success if success else buffer.failure).append(exp)


def sample_dered(buffer: DualReplayBuffer, n: int, balance: float,
                 rng: np.random.Generator) -> list[Experience]:
    """Balanced draw: ``ceil(balance * n)`` successes, the rest failures.

    Successes are drawn with replacement. Failures are drawn without
    replacement when there are enough of them. If one side is empty the whole
    batch comes from the other. The result is shuffled.
    """
    if not 0.0 <= balance <= 1.0:
        raise ReplayError(f"balance must lie in [0, 1], got {balance}")
    ns, nf = len(buffer.success), len(buffer.failure)
    if ns == 0 and nf == 0:
        raise ReplayError("both success and failure buffers are empty")
    if ns == 0:
        n_succ = 0
    elif nf == 0:
        n_succ = n
    else:
        n_succ = math.ceil(balance * n)
    n_fail = n - n_succ

    batch = [buffer.success[i] for i in rng.integers(ns, size=n_succ)] if n_succ else []
    if n_fail:
        idx = rng.choice(nf, size=n_fail, replace=nf < n_fail)
        batch += [buffer.failure[i] for i in idx]
    order = rng.permutation(len(batch))
    return [batch[i] for i in order]


@dataclass(frozen=True)
class DistortionConfig:
    lam: float = 0.2
    mode: str = "ratio_draw"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ReplayError(f"distortion lambda must lie in [0, 1], got {self.lam}")
        if self.mode not in DISTORTION_MODES:
            raise ReplayError(f"unknown distortion mode {self.mode!r}")


def distort_batch(batch: Sequence[Experience], cfg: DistortionConfig, n_actions: int,
                  rng: np.random.Generator, ratio: Optional[float] = None) -> list[Experience]:
    """Replace the action of a random subset of ``batch``.

    ``ratio_draw`` draws one ratio from U(0, lam) (or uses ``ratio`` when
    given) and distorts ``floor(ratio * len(batch))`` distinct experiences.
    ``per_experience`` distorts each experience independently with
    probability ``lam``. Only ``action_index`` ever changes.
    """
    if len(batch) == 0:
        raise ReplayError("cannot distort an empty batch")
    out = list(batch)
    if cfg.lam == 0.0 and ratio is None:
        return out
    if cfg.mode == "ratio_draw":
        r = rng.uniform(0.0, cfg.lam) if ratio is None else ratio
        chosen = rng.choice(len(out), size=int(math.floor(r * len(out))), replace=False)
    else:
        chosen = np.flatnonzero(rng.random(len(out)) < cfg.lam)
    for pos in chosen:
        out[pos] = replace(out[pos], action_index=int(rng.integers(n_actions)))
    return out


# --------------------------------------------------------------------------
# Prioritized replay

class SumTree:
    """Binary tree whose internal nodes hold the sum of their children."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        size = 1
        while size < capacity:
            size *= 2
        self._leaves = size
        self.tree = np.zeros(2 * size, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def __getitem__(self, slot: int) -> float:
        return float(self.tree[self._leaves + slot])

    def set(self, slot: int, value: float) -> None:
        i = self._leaves + slot
        self.tree[i] = value
        i //= 2
        while i >= 1:
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1]
            i //= 2

    def find(self, mass: float) -> int:
        """Slot whose cumulative interval contains ``mass`` (0 <= mass < total)."""
        i = 1
        while i < self._leaves:
            left = self.tree[2 * i]
            if mass < left:
                i = 2 * i
            else:
                mass -= left
                i = 2 * i + 1
        return i - self._leaves

    def leaves(self, n: int) -> np.ndarray:
        return self.tree[self._leaves:self._leaves + n]


class PrioritizedBuffer:
    """Proportional prioritized replay.

    A slot is drawn with probability proportional to ``priority ** alpha``,
    where ``priority = |td_error| + eps``. New experiences enter with the
    largest priority seen so far.
    """

    def __init__(self, capacity: int = 10_000, alpha: float = 0.6, eps: float = 1e-6):
        if alpha < 0:
            raise ReplayError(f"alpha must be >= 0, got {alpha}")
        if eps <= 0:
            raise ReplayError(f"eps must be > 0, got {eps}")
        self.ring = RingBuffer(capacity)
        self.tree = SumTree(capacity)
        self.priorities = np.zeros(capacity, dtype=np.float64)
        self.alpha = alpha
        self.eps = eps
        self.max_priority = 1.0

    def __len__(self) -> int:
        return len(self.ring)

    def add(self, exp: Experience, priority: Optional[float] = None) -> int:
        slot = self.ring.append(exp)
        self._set(slot, self.max_priority if priority is None else priority)
        return slot

    def _set(self, slot: int, priority: float) -> None:
        if not priority > 0 or not math.isfinite(priority):
            raise ReplayError(f"priorities must be positive and finite, got {priority}")
        self.priorities[slot] = priority
        self.tree.set(slot, priority ** self.alpha)
        self.max_priority = max(self.max_priority, priority)

    def update_priorities(self, slots, td_errors) -> None:
        for slot, err in zip(slots, td_errors):
            self._set(int(slot), abs(float(err)) + self.eps)

    def probabilities(self) -> np.ndarray:
        mass = self.tree.leaves(len(self))
        return mass / mass.sum()


def sample_prioritized(buffer: PrioritizedBuffer, n: int, rng: np.random.Generator,
                       beta: float = 0.4):
    """Draw ``n`` experiences; returns ``(experiences, weights, slots)``.

    Importance weights ``(N * P(i)) ** -beta`` are divided by the largest
    weight any stored experience could get, so they lie in (0, 1].
    """
    size = len(buffer)
    if size == 0:
        raise ReplayError("cannot sample from an empty buffer")
    total = buffer.tree.total
    slots = np.array([buffer.tree.find(m) for m in rng.uniform(0.0, total, size=n)],
                     dtype=np.int64)
    np.minimum(slots, size - 1, out=slots)   # guards the mass == total rounding edge
    probs = buffer.tree.leaves(size) / total
    weights = (size * probs[slots]) ** (-beta)
    weights /= (size * probs.min()) ** (-beta)
    return [buffer.ring[s] for s in slots], weights, slots
