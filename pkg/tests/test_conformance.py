import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ampd.conformance import ConformanceError, log_fitness, trace_fitness
from ampd.discovery import ProcessModel, dependency_matrix, directly_follows_counts, discover_model
from ampd.eventlog import EventLog, Trace, log_from_sequences


def model_of(alphabet, edges):
    return ProcessModel(tuple(alphabet), frozenset(edges), 0.5)


def test_perfect_fit():
    log = log_from_sequences([list("ABC")])
    assert log_fitness(log, model_of("ABC", {("A", "B"), ("B", "C")})).log_fitness == 1.0


def test_half_fit():
    log = log_from_sequences([list("ABC")])
    report = log_fitness(log, model_of("ABC", {("A", "B")}))
    assert report.log_fitness == 0.5
    assert (report.per_trace[0].matched, report.per_trace[0].total) == (1, 2)


def test_pair_weighted_over_traces():
    log = log_from_sequences([list("AB"), list("ACB")])
    report = log_fitness(log, model_of("ABC", {("A", "B"), ("A", "C")}))
    assert report.log_fitness == pytest.approx(2 / 3)
    assert [t.fitness for t in report.per_trace] == [1.0, 0.5]


def test_vacuous_cases():
    single = log_from_sequences([["A"], ["B"]])
    report = log_fitness(single, model_of("AB", set()))
    assert report.log_fitness == 1.0 and report.vacuous
    assert log_fitness(log_from_sequences([]), model_of("", set())).log_fitness == 1.0


def test_empty_trace_is_rejected():
    with pytest.raises(ConformanceError):
        trace_fitness(Trace("x", ()), model_of("A", set()))
    with pytest.raises(ConformanceError):
        log_fitness(EventLog((Trace("x", ()),), ()), model_of("A", set()))


def test_write_csv(tmp_path):
    report = log_fitness(log_from_sequences([list("AB"), list("BA")]), model_of("AB", {("A", "B")}))
    report.write_csv(tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines() == [
        "case_id,trace_fitness,matched,total", "c0,1.000000,1,1", "c1,0.000000,0,1"]


sequences = st.lists(st.lists(st.sampled_from("ABCD"), min_size=1, max_size=6),
                     min_size=1, max_size=6)
all_pairs = list(itertools.product("ABCD", repeat=2))


@settings(max_examples=150, deadline=None)
@given(sequences, st.sets(st.sampled_from(all_pairs)), st.sets(st.sampled_from(all_pairs)))
def test_bounds_and_monotone_in_edges(seqs, e1, e2):
    log = log_from_sequences(seqs)
    small = log_fitness(log, model_of("ABCD", e1)).log_fitness
    big = log_fitness(log, model_of("ABCD", e1 | e2)).log_fitness
    assert 0.0 <= small <= big <= 1.0


@settings(max_examples=150, deadline=None)
@given(sequences, st.sets(st.sampled_from(all_pairs)))
def test_perfect_fitness_iff_all_pairs_are_edges(seqs, edges):
    log = log_from_sequences(seqs)
    pairs = {(a, b) for s in seqs for a, b in zip(s, s[1:])}
    assert (log_fitness(log, model_of("ABCD", edges)).log_fitness == 1.0) == (pairs <= edges)


@settings(max_examples=80, deadline=None)
@given(sequences, st.floats(0, 1), st.floats(0, 1))
def test_fitness_non_increasing_in_threshold(seqs, t1, t2):
    log = log_from_sequences(seqs)
    dm = dependency_matrix(directly_follows_counts(log))
    lo, hi = sorted((t1, t2))
    assert (log_fitness(log, discover_model(dm, hi)).log_fitness
            <= log_fitness(log, discover_model(dm, lo)).log_fitness)
