import math

import numpy as np
import pytest
from scipy.stats import chisquare

from ampd import trainer
from ampd.discovery import read_dot
from ampd.env import ActionSpace, build_action_space
from ampd.eventlog import SynthSpec, generate_synthetic_table
from ampd.replay import (DistortionConfig, DualReplayBuffer, Experience, distort_batch,
                         sample_dered, store_experience)
from ampd.trainer import (METRICS_HEADER, Learner, TrainingConfig, TrainingError, child_rng,
                          episode_metrics, epsilon_at, format_metrics, run_episode,
                          select_action, train, write_report)


def small_config(**kw):
    base = dict(epochs=3, trials=6, network="reduced", state_side=8, net_channels=(2, 4, 4),
                net_hidden=8, grid_start=0.5, grid_stop=1.0, grid_step=0.5, batch_size=4,
                learning_rate=1e-3, seed=7)
    return TrainingConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def table():
    return generate_synthetic_table(SynthSpec(30, ("A", "B|C", "D"), n_noise_columns=1,
                                              noise_rate=0.1), seed=0)


def test_select_action_greedy_and_ties():
    space = ActionSpace(3, (0.1, 0.2, 0.3))
    rng = np.random.default_rng(0)
    assert select_action([0.1, 0.9, 0.3], 0.0, space, rng).index == 1
    assert select_action([0.5, 0.5, 0.1], 0.0, space, rng).index == 0
    with pytest.raises(TrainingError):
        select_action([0.1, 0.2], 0.0, space, rng)
    with pytest.raises(TrainingError):
        select_action([0.1, 0.2, 0.3], 1.5, space, rng)


def test_select_action_random_branch_is_uniform_and_skips_q():
    space = ActionSpace(4, (0.5, 1.0))     # 8 actions
    rng = np.random.default_rng(1)

    def boom():
        raise AssertionError("Q-values evaluated on the random branch")

    counts = np.bincount([select_action(boom, 1.0, space, rng).index for _ in range(10_000)],
                         minlength=8)
    sigma = math.sqrt(10_000 * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - 1250) < 3 * sigma)


def test_episode_metrics_hand_aggregation():
    m = episode_metrics(1, [1, 2, 3, 4, 5], [1.0, 0.8, 0.6, 0.71, 0.2], 0.5)
    assert m.count_ge_threshold == 3
    assert m.avg_fitness == pytest.approx(0.662)
    assert m.total_score == 15
    assert math.isnan(m.mean_loss)
    assert episode_metrics(1, [0], [0.7], 0.5).count_ge_threshold == 1   # >= at the boundary


def test_epsilon_schedule():
    cfg = TrainingConfig(epochs=10, trials=10)
    values = [epsilon_at(s, cfg) for s in range(cfg.total_steps)]
    assert values[0] == 1.0
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert values[70] == pytest.approx(0.05)
    assert values[69] > 0.05
    np.testing.assert_allclose(values[70:], 0.05)


def test_child_rng_streams_are_stable_and_distinct():
    a = child_rng(3, "train").random(4)
    np.testing.assert_array_equal(a, child_rng(3, "train").random(4))
    assert not np.array_equal(a, child_rng(3, "init").random(4))
    assert not np.array_equal(a, child_rng(4, "train").random(4))


def test_run_episode_stores_one_experience_per_trial(table):
    cfg = small_config(trials=5, epochs=1)
    space = build_action_space(table.n_columns, cfg.param_grid())
    learner = Learner.create(cfg, space)
    trials = []
    m = run_episode(table, learner, 1, child_rng(0, "t"), trials)
    assert len(learner.memory) == 5 and len(trials) == 5
    assert m.count_ge_threshold == sum(t.fitness >= 0.7 for t in trials)
    assert m.avg_fitness == pytest.approx(np.mean([t.fitness for t in trials]))
    assert learner.updates == 2          # batch of 4 first available at the 4th trial


def test_random_episode_trains_without_policy_evaluation(table, monkeypatch):
    cfg = small_config(epsilon_start=1.0, epsilon_end=1.0, epochs=1, trials=8)
    learner = Learner.create(cfg, build_action_space(table.n_columns, cfg.param_grid()))

    def boom(*a, **k):
        raise AssertionError("policy evaluated for action selection")

    monkeypatch.setattr(trainer.qnet, "forward", boom)
    run_episode(table, learner, 1, child_rng(0, "t"))
    assert learner.updates == 5


def test_minimal_run(table):
    report = train(table, small_config(epochs=1, trials=1))
    assert len(report.metrics) == 1 and len(report.trials) == 1
    assert len(report.best) == 1
    assert math.isnan(report.metrics[0].mean_loss)


@pytest.mark.parametrize("strategy", ["uniform", "prioritized", "dered"])
def test_conservation_and_consistency(table, strategy):
    cfg = small_config(strategy=strategy)
    report = train(table, cfg)
    assert len(report.trials) == cfg.epochs * cfg.trials
    for m in report.metrics:
        fits = [t.fitness for t in report.trials if t.epoch == m.epoch]
        assert len(fits) == cfg.trials
        assert 0 <= m.count_ge_threshold <= cfg.trials
        assert m.count_ge_threshold == sum(f >= 0.7 for f in fits)
        assert 0.0 <= m.avg_fitness <= 1.0
    fits = [b.fitness for b in report.best]
    assert fits == sorted(fits, reverse=True)
    assert len({b.action_index for b in report.best}) == len(report.best)


def test_dual_buffer_sizes_after_training(table):
    cfg = small_config()
    space = build_action_space(table.n_columns, cfg.param_grid())
    learner = Learner.create(cfg, space)
    rng = child_rng(cfg.seed, "train")
    for epoch in range(1, cfg.epochs + 1):
        run_episode(table, learner, epoch, rng)
    assert len(learner.memory.success) + len(learner.memory.failure) == cfg.epochs * cfg.trials
    assert all(e.fitness > 0.7 for e in learner.memory.success)
    assert all(e.fitness <= 0.7 for e in learner.memory.failure)


def test_training_is_deterministic(table):
    a = format_metrics(train(table, small_config()).metrics)
    b = format_metrics(train(table, small_config()).metrics)
    assert a == b
    assert a != format_metrics(train(table, small_config(seed=8)).metrics)


def test_dered_degenerates_to_uniform_over_failures():
    buf = DualReplayBuffer(capacity=100)
    for i in range(10):
        store_experience(buf, Experience(i, i, 0.0, None, 0.1 * (i % 5), False))
    rng = np.random.default_rng(0)
    cfg = DistortionConfig(lam=0.0)
    draws = []
    for _ in range(2000):
        batch = distort_batch(sample_dered(buf, 5, 0.0, rng), cfg, 10, rng)
        draws.extend(e.state for e in batch)
    assert len(draws) == 10_000
    assert chisquare(np.bincount(draws, minlength=10)).pvalue > 0.001


def test_config_validation():
    with pytest.raises(TrainingError):
        TrainingConfig(epochs=0)
    with pytest.raises(TrainingError):
        TrainingConfig(strategy="other")
    with pytest.raises(TrainingError):
        TrainingConfig(network="full", state_side=16)
    with pytest.raises(TrainingError):
        TrainingConfig(epsilon_start=0.1, epsilon_end=0.5)


def test_write_report_layout(tmp_path, table):
    report = train(table, small_config())
    out = write_report(report, tmp_path / "run")
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 1 + report.config.epochs
    assert all(len(f.split(".")[1]) == 6 for f in lines[1].split(",")[1:3])
    first = (out / "metrics.csv").read_bytes()
    write_report(report, tmp_path / "run")
    assert (out / "metrics.csv").read_bytes() == first
    assert (out / "config.snapshot").exists() and (out / "checkpoint.bin").exists()
    dots = sorted((out / "models").glob("best_*.dot"))
    assert len(dots) == len(report.best)
    back = read_dot(dots[0].read_text())
    assert back.edges == report.best[0].model.edges
