"""Deep Q-learning loop that searches column mappings and thresholds.

One episode is ``trials`` consecutive environment steps starting from the
all-zero state. Every step stores one experience; once a full batch can be
drawn, every step also performs one Adam update. The replay strategy decides
how batches are drawn:

``uniform``      single ring buffer, uniform draws
``prioritized``  proportional prioritized replay with importance weights
``dered``        dual success/failure buffers, balanced draws, distortion
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import qnet
from .discovery import ProcessModel, export_dot
from .env import (REWARD_MODES, ActionSpace, EnvConfig, EnvState, StepOutcome,
                  build_action_space, env_step, initial_state, threshold_grid)
from .eventlog import EventTable
from .replay import (DISTORTION_MODES, DistortionConfig, DualReplayBuffer, Experience,
                     PrioritizedBuffer, RingBuffer, distort_batch, sample_dered,
                     sample_prioritized, sample_uniform, store_experience)

log = logging.getLogger(__name__)

STRATEGIES = ("uniform", "prioritized", "dered")
SUCCESS_COUNT_THRESHOLD = 0.7


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 100
    trials: int = 50
    min_fitness: float = 0.7
    gamma: float = 0.9
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.7
    strategy: str = "dered"
    distortion_lambda: float = 0.2
    distortion_mode: str = "ratio_draw"
    balance: float = 0.5
    batch_size: int = 32
    buffer_capacity: int = 10_000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sync_every: int = 0          # 0: sync the target once per episode
    terminal: bool = True        # treat every trial as terminal for TD targets
    seed: int = 0
    reward_mode: str = "fitness_plus_std"
    grid_start: float = 0.01
    grid_stop: float = 1.0
    grid_step: float = 0.01
    permutations: bool = False
    network: str = "full"
    state_side: int = 128        # input side of the reduced network; full is always 128
    net_channels: tuple[int, int, int] = (8, 16, 16)
    net_hidden: int = 64
    dtype: str = "float64"
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    per_epsilon: float = 1e-6
    pi_tradeoff: float = 0.0     # recorded only; has no effect on training
    best_k: int = 5

    def __post_init__(self):
        checks = [
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.trials >= 1, "trials must be >= 1"),
            (0.0 <= self.min_fitness <= 1.0, "min_fitness must lie in [0, 1]"),
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0,
             "need 0 <= epsilon_end <= epsilon_start <= 1"),
            (0.0 < self.epsilon_decay_fraction <= 1.0, "epsilon_decay_fraction must lie in (0, 1]"),
            (self.strategy in STRATEGIES, f"strategy must be one of {STRATEGIES}"),
            (0.0 <= self.distortion_lambda <= 1.0, "distortion_lambda must lie in [0, 1]"),
            (self.distortion_mode in DISTORTION_MODES, f"distortion_mode must be one of {DISTORTION_MODES}"),
            (0.0 <= self.balance <= 1.0, "balance must lie in [0, 1]"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.buffer_capacity >= 1, "buffer_capacity must be >= 1"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0, "Adam betas must lie in [0, 1)"),
            (self.sync_every >= 0, "sync_every must be >= 0"),
            (self.seed >= 0, "seed must be a non-negative integer"),
            (self.reward_mode in REWARD_MODES, f"reward_mode must be one of {REWARD_MODES}"),
            (self.network in ("full", "reduced"), "network must be 'full' or 'reduced'"),
            (self.network == "reduced" or self.state_side == 128,
             "the full network needs state_side = 128"),
            (self.state_side >= 4, "state_side must be >= 4"),
            (self.dtype in ("float64", "float32"), "dtype must be float64 or float32"),
            (self.per_alpha >= 0, "per_alpha must be >= 0"),
            (self.per_epsilon > 0, "per_epsilon must be positive"),
            (self.best_k >= 1, "best_k must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise TrainingError(msg)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.trials

    def param_grid(self) -> tuple[float, ...]:
        return threshold_grid(self.grid_start, self.grid_stop, self.grid_step)

    def env_config(self) -> EnvConfig:
        return EnvConfig(self.param_grid(), self.min_fitness, self.reward_mode,
                         self.state_side, self.permutations)

    def profile(self, n_actions: int) -> qnet.NetworkProfile:
        if self.network == "full":
            return qnet.full_profile(n_actions, self.dtype)
        return qnet.reduced_profile(n_actions, self.state_side, self.net_channels,
                                    self.net_hidden, self.dtype)


def child_rng(seed: int, tag: str) -> np.random.Generator:
    """Independent stream for ``(seed, tag)``; adding streams never shifts existing ones."""
    tag_key = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag_key]))


def epsilon_at(step: int, cfg: TrainingConfig) -> float:
    """Linear decay from ``epsilon_start`` to ``epsilon_end``, then flat."""
    decay_steps = max(1, round(cfg.epsilon_decay_fraction * cfg.total_steps))
    frac = min(1.0, step / decay_steps)
    return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac


def per_beta_at(step: int, cfg: TrainingConfig) -> float:
    frac = min(1.0, step / max(1, cfg.total_steps - 1))
    return cfg.per_beta_start + (cfg.per_beta_end - cfg.per_beta_start) * frac


def select_action(q_values: Union[Sequence[float], Callable[[], np.ndarray]], epsilon: float,
                  action_space: ActionSpace, rng: np.random.Generator):
    """Epsilon-greedy choice; greedy ties go to the lowest index.

    ``q_values`` may be a zero-argument callable, evaluated only when the
    greedy branch is taken.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise TrainingError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        return action_space[int(rng.integers(len(action_space)))]
    q = np.asarray(q_values() if callable(q_values) else q_values).ravel()
    if len(q) != len(action_space):
        raise TrainingError(f"{len(q)} Q-values for {len(action_space)} actions")
    return action_space[int(np.argmax(q))]


# --------------------------------------------------------------------------
# Results

@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    total_score: float
    avg_fitness: float
    count_ge_threshold: int
    epsilon: float
    mean_loss: float


@dataclass(frozen=True)
class TrialRecord:
    epoch: int
    trial: int
    action_index: int
    fitness: float
    reward: float
    success: bool


@dataclass(frozen=True)
class BestModel:
    action: tuple
    action_index: int
    fitness: float
    epoch: int
    model: ProcessModel


@dataclass
class RunReport:
    config: TrainingConfig
    metrics: list[EpochMetrics]
    trials: list[TrialRecord]
    best: list[BestModel]
    wall_clock: float
    seed: int
    policy: Optional[qnet.NetworkParams] = None
    optimizer: Optional[qnet.OptimizerState] = None


# --------------------------------------------------------------------------
# Learner state

@dataclass
class Learner:
    """Everything the training loop mutates: networks, optimizer, replay memory."""
    config: TrainingConfig
    action_space: ActionSpace
    policy: qnet.NetworkParams
    target: qnet.NetworkParams
    optimizer: qnet.OptimizerState
    memory: Union[RingBuffer, PrioritizedBuffer, DualReplayBuffer]
    step: int = 0
    updates: int = 0
    outcome_cache: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: TrainingConfig, action_space: ActionSpace) -> "Learner":
        profile = config.profile(len(action_space))
        policy = qnet.init_params(profile, child_rng(config.seed, "init"))
        target = policy.copy()
        opt = qnet.OptimizerState.for_params(
            policy, learning_rate=config.learning_rate, beta1=config.beta1,
            beta2=config.beta2, eps=config.adam_eps)
        if config.strategy == "uniform":
            memory = RingBuffer(config.buffer_capacity)
        elif config.strategy == "prioritized":
            memory = PrioritizedBuffer(config.buffer_capacity, config.per_alpha, config.per_epsilon)
        else:
            memory = DualReplayBuffer(config.buffer_capacity, config.min_fitness)
        return cls(config, action_space, policy, target, opt, memory)

    def store(self, exp: Experience) -> None:
        if isinstance(self.memory, DualReplayBuffer):
            store_experience(self.memory, exp)
        elif isinstance(self.memory, PrioritizedBuffer):
            self.memory.add(exp)
        else:
            self.memory.append(exp)

    def can_update(self) -> bool:
        return len(self.memory) >= self.config.batch_size

    def sample(self, rng: np.random.Generator):
        cfg = self.config
        n = cfg.batch_size
        if cfg.strategy == "uniform":
            return sample_uniform(self.memory, n, rng), None, None
        if cfg.strategy == "prioritized":
            return sample_prioritized(self.memory, n, rng, per_beta_at(self.step, cfg))
        batch = sample_dered(self.memory, n, cfg.balance, rng)
        batch = distort_batch(batch, DistortionConfig(cfg.distortion_lambda, cfg.distortion_mode),
                              len(self.action_space), rng)
        return batch, None, None

    def update(self, rng: np.random.Generator) -> float:
        cfg = self.config
        batch, weights, slots = self.sample(rng)
        states = np.stack([e.state.tensor for e in batch])
        terminal = np.array([e.terminal for e in batch], dtype=bool)
        next_states = None
        if cfg.gamma > 0 and not terminal.all():
            next_states = np.stack([e.next_state.tensor for e in batch])
        tb = qnet.TrainBatch(states, np.array([e.action_index for e in batch]),
                             np.array([e.reward for e in batch]), next_states, terminal)
        targets = qnet.td_targets(tb, self.target, cfg.gamma)
        loss, grads, stats, resid = qnet.loss_and_grads(
            self.policy, tb.states, tb.action_indices, targets, weights)
        qnet.adam_step(self.policy, grads, self.optimizer)
        qnet.apply_batch_stats(self.policy, stats)
        if slots is not None:
            self.memory.update_priorities(slots, resid)
        self.updates += 1
        return loss

    def outcome(self, table: EventTable, action, env_cfg: EnvConfig) -> StepOutcome:
        # env_step is a pure function of (table, action, config)
        hit = self.outcome_cache.get(action.index)
        if hit is None:
            hit = self.outcome_cache[action.index] = env_step(table, action, env_cfg)
        return hit


def run_episode(table: EventTable, learner: Learner, epoch: int, rng: np.random.Generator,
                trials_out: Optional[list] = None) -> EpochMetrics:
    cfg = learner.config
    env_cfg = cfg.env_config()
    space = learner.action_space
    state: EnvState = initial_state(cfg.state_side)
    eps_first = epsilon_at(learner.step, cfg)
    rewards, fitnesses, losses = [], [], []

    for t in range(cfg.trials):
        eps = epsilon_at(learner.step, cfg)
        current = state
        action = select_action(lambda: qnet.forward(learner.policy, current.tensor)[0],
                               eps, space, rng)
        out = learner.outcome(table, action, env_cfg)
        learner.store(Experience(state, action.index, out.reward, out.next_state,
                                 out.fitness, out.success, cfg.terminal))
        if learner.can_update():
            losses.append(learner.update(rng))
        learner.step += 1
        if cfg.sync_every and learner.step % cfg.sync_every == 0:
            qnet.sync_target(learner.policy, learner.target)
        rewards.append(out.reward)
        fitnesses.append(out.fitness)
        if trials_out is not None:
            trials_out.append(TrialRecord(epoch, t, action.index, out.fitness, out.reward, out.success))
        state = out.next_state

    if not cfg.sync_every:
        qnet.sync_target(learner.policy, learner.target)
    return episode_metrics(epoch, rewards, fitnesses, eps_first, losses)


def episode_metrics(epoch: int, rewards: Sequence[float], fitnesses: Sequence[float],
                    epsilon: float, losses: Sequence[float] = ()) -> EpochMetrics:
    return EpochMetrics(
        epoch=epoch,
        total_score=float(np.sum(rewards)),
        avg_fitness=float(np.mean(fitnesses)),
        count_ge_threshold=int(sum(f >= SUCCESS_COUNT_THRESHOLD for f in fitnesses)),
        epsilon=epsilon,
        mean_loss=float(np.mean(losses)) if len(losses) else math.nan,
    )


def _best_models(trials: list[TrialRecord], learner: Learner, table: EventTable, k: int):
    first_seen: dict[int, TrialRecord] = {}
    for rec in trials:
        first_seen.setdefault(rec.action_index, rec)
    ranked = sorted(first_seen.values(), key=lambda r: (-r.fitness, r.epoch, r.trial))[:k]
    env_cfg = learner.config.env_config()
    best = []
    for rec in ranked:
        action = learner.action_space[rec.action_index]
        out = learner.outcome(table, action, env_cfg)
        best.append(BestModel((action.threshold, *action.columns), rec.action_index,
                              rec.fitness, rec.epoch, out.model))
    return best


def train(table: EventTable, config: TrainingConfig,
          progress: Optional[Callable[[EpochMetrics], None]] = None) -> RunReport:
    """Run ``config.epochs`` episodes and collect the report. Deterministic per seed."""
    started = time.perf_counter()
    space = build_action_space(table.n_columns, config.param_grid(), config.permutations)
    learner = Learner.create(config, space)
    rng = child_rng(config.seed, "train")
    metrics: list[EpochMetrics] = []
    trials: list[TrialRecord] = []
    for epoch in range(1, config.epochs + 1):
        m = run_episode(table, learner, epoch, rng, trials)
        metrics.append(m)
        log.debug("epoch %d: score=%.4f fit=%.4f count=%d eps=%.3f loss=%.5f", epoch,
                  m.total_score, m.avg_fitness, m.count_ge_threshold, m.epsilon, m.mean_loss)
        if progress is not None:
            progress(m)
    best = _best_models(trials, learner, table, config.best_k)
    return RunReport(config, metrics, trials, best, time.perf_counter() - started,
                     config.seed, learner.policy, learner.optimizer)


# --------------------------------------------------------------------------
# Output

METRICS_HEADER = "epoch,total_score,avg_fitness,count_ge_threshold,epsilon,mean_loss"


def format_metrics(metrics: Sequence[EpochMetrics]) -> str:
    lines = [METRICS_HEADER]
    for m in metrics:
        lines.append(f"{m.epoch},{m.total_score:.6f},{m.avg_fitness:.6f},"
                     f"{m.count_ge_threshold},{m.epsilon:.6f},{m.mean_loss:.6f}")
    return "\n".join(lines) + "\n"


def config_snapshot(config: TrainingConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def write_report(report: RunReport, out_dir) -> Path:
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(config_snapshot(report.config), encoding="utf-8")
    (out / "metrics.csv").write_text(format_metrics(report.metrics), encoding="utf-8")
    trial_lines = ["epoch,trial,action_index,fitness,reward,success"]
    trial_lines += [f"{r.epoch},{r.trial},{r.action_index},{r.fitness:.6f},{r.reward:.6f},"
                    f"{int(r.success)}" for r in report.trials]
    (out / "trials.csv").write_text("\n".join(trial_lines) + "\n", encoding="utf-8")
    for rank, b in enumerate(report.best, start=1):
        (out / "models" / f"best_{rank}.dot").write_text(export_dot(b.model), encoding="utf-8")
    if report.policy is not None:
        qnet.save_checkpoint(report.policy, report.optimizer, out / "checkpoint.bin")
    return out
