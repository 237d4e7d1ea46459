import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ampd.discovery import (DirectlyFollowsMatrix, DiscoveryError, ProcessModel,
                            dependency_matrix, directly_follows_counts, discover,
                            discover_model, export_dot, fuzzy_relative_significance,
                            fuzzy_utility, fuzzy_utility_matrix, max_normalized_correlation,
                            read_dot)
from ampd.eventlog import ColumnMapping, log_from_sequences


def df_from(counts, alphabet=None):
    counts = np.asarray(counts, dtype=np.int64)
    alphabet = alphabet or tuple("ABCDEFGH"[: len(counts)])
    return DirectlyFollowsMatrix(alphabet, counts, counts.sum(axis=0) + counts.sum(axis=1))


def brute_dep(sequences):
    """Pair-counting oracle, independent of the numpy path."""
    acts = sorted({a for s in sequences for a in s})
    def count(x, y):
        return sum(1 for s in sequences for i in range(len(s) - 1) if s[i] == x and s[i + 1] == y)
    return {(x, y): (count(x, y) - count(y, x)) / (count(x, y) + count(y, x) + 1)
            for x in acts for y in acts}


def test_directly_follows_counts_hand_count():
    df = directly_follows_counts(log_from_sequences([list("ABC"), list("AB")]))
    idx = {a: i for i, a in enumerate(df.alphabet)}
    assert df.counts[idx["A"], idx["B"]] == 2
    assert df.counts[idx["B"], idx["C"]] == 1
    assert df.counts.sum() == 3
    assert list(df.activity_freq) == [2, 2, 1]


def test_directly_follows_empty_and_self_loop():
    assert directly_follows_counts(log_from_sequences([])).counts.shape == (0, 0)
    assert directly_follows_counts(log_from_sequences([["A", "A"]])).counts[0, 0] == 1


@pytest.mark.parametrize("ab, ba, expected", [(5, 1, 4 / 7), (0, 0, 0.0), (5, 0, 5 / 6)])
def test_dependency_values(ab, ba, expected):
    dep = dependency_matrix(df_from([[0, ab], [ba, 0]])).dep
    assert dep[0, 1] == pytest.approx(expected, abs=1e-15)
    assert dep[1, 0] == -dep[0, 1]


def test_dependency_diagonal_literal():
    dep = dependency_matrix(df_from([[3, 0], [0, 0]])).dep
    assert dep[0, 0] == 0.0          # c - c = 0 on the diagonal
    # a self-loop count never produces a positive diagonal under the literal formula


sequences = st.lists(st.lists(st.sampled_from("ABCDE"), min_size=1, max_size=5),
                     min_size=0, max_size=5)


@settings(max_examples=200, deadline=None)
@given(sequences)
def test_dependency_matches_bruteforce_and_is_antisymmetric(seqs):
    log = log_from_sequences(seqs)
    dm = dependency_matrix(directly_follows_counts(log))
    oracle = brute_dep(seqs)
    for i, a in enumerate(dm.alphabet):
        for j, b in enumerate(dm.alphabet):
            assert abs(dm.dep[i, j] - oracle[(a, b)]) <= 1e-12
    np.testing.assert_array_equal(dm.dep + dm.dep.T, np.zeros_like(dm.dep))
    assert np.all(np.abs(dm.dep) < 1)
    assert directly_follows_counts(log).counts.sum() == sum(len(s) - 1 for s in seqs)


def test_discover_model_threshold_semantics():
    dm = dependency_matrix(df_from([[0, 5], [1, 0]]))
    m = discover_model(dm, 0.5, ColumnMapping(0, 1, 2))
    assert m.edges == {("A", "B")}
    assert m.mapping == ColumnMapping(0, 1, 2)
    # threshold 0 admits every cell with dep >= 0, zeros included
    assert discover_model(dm, 0.0).edges == {("A", "A"), ("A", "B"), ("B", "B")}
    assert discover_model(dm, 1.0).edges == frozenset()


@pytest.mark.parametrize("bad", [-0.01, 1.01])
def test_discover_model_rejects_threshold(bad):
    with pytest.raises(DiscoveryError):
        discover_model(dependency_matrix(df_from([[0]])), bad)


@settings(max_examples=50, deadline=None)
@given(sequences, st.lists(st.floats(0, 1), min_size=2, max_size=6))
def test_edge_sets_nested_under_threshold(seqs, thresholds):
    dm = dependency_matrix(directly_follows_counts(log_from_sequences(seqs)))
    models = [discover_model(dm, t) for t in sorted(thresholds)]
    for lo, hi in zip(models, models[1:]):
        assert hi.edges <= lo.edges


def test_relative_significance_hand_value():
    # row A sums to 8, column B sums to 16, Sig(A,B)=4
    counts = np.array([[0, 4, 4], [0, 0, 0], [0, 12, 0]])
    rel = fuzzy_relative_significance(df_from(counts))
    assert rel[0, 1] == pytest.approx(0.375, abs=1e-15)
    assert rel[1, 0] == 0.0


def test_relative_significance_only_context():
    rel = fuzzy_relative_significance(df_from([[0, 7], [0, 0]]))
    assert rel[0, 1] == pytest.approx(1.0)


def test_relative_significance_zero_rows_contribute_zero():
    rel = fuzzy_relative_significance(df_from(np.zeros((3, 3), dtype=int)))
    np.testing.assert_array_equal(rel, np.zeros((3, 3)))


def test_fuzzy_utility():
    assert fuzzy_utility(0.6, 0.2, 0.5) == pytest.approx(0.4)
    assert fuzzy_utility(0.6, 0.2, 1.0) == 0.6
    assert fuzzy_utility(0.6, 0.2, 0.0) == 0.2
    with pytest.raises(DiscoveryError):
        fuzzy_utility(0.6, 0.2, 1.5)


def test_default_correlation_and_utility_matrix():
    df = df_from([[0, 4], [2, 0]])
    np.testing.assert_allclose(max_normalized_correlation(df), [[0, 1], [0.5, 0]])
    util = fuzzy_utility_matrix(df, 0.5, correlation=lambda d: np.ones((2, 2)))
    np.testing.assert_allclose(util, 0.5 * fuzzy_relative_significance(df) + 0.5)


def test_export_dot_format_and_determinism():
    _, model = discover(log_from_sequences([list("AB")] * 5 + [list("BA")]), 0.5,
                        ColumnMapping(0, 1, 2))
    text = export_dot(model)
    assert '"A" -> "B" [label="0.571"];' in text
    assert text.startswith("digraph process_model {")
    assert export_dot(model) == text


def test_export_dot_empty_model_has_nodes_only():
    model = ProcessModel(("A", "B"), frozenset(), 1.0)
    text = export_dot(model)
    assert '"A";' in text and '"B";' in text and "->" not in text


def test_dot_round_trip_with_awkward_names():
    model = ProcessModel(('say "hi"', "back\\slash", "plain"),
                         frozenset({('say "hi"', "plain"), ("plain", "back\\slash")}), 0.3,
                         ColumnMapping(2, 0, 1), {('say "hi"', "plain"): 0.9,
                                                  ("plain", "back\\slash"): 0.31})
    back = read_dot(export_dot(model))
    assert back.alphabet == model.alphabet
    assert back.edges == model.edges
    assert back.mapping == model.mapping
    assert back.threshold == pytest.approx(0.3)


@pytest.mark.parametrize("text, line", [
    ("digraph g {\n  subgraph x { }\n}\n", 2),
    ("graph g {\n}\n", 1),
    ('digraph g {\n  "A";\n  "A" -- "B";\n}\n', 3),
])
def test_read_dot_rejects_foreign_statements(text, line):
    with pytest.raises(DiscoveryError, match=f"line {line}"):
        read_dot(text)


def test_read_dot_needs_closing_brace():
    with pytest.raises(DiscoveryError, match="closing"):
        read_dot('digraph g {\n  "A";\n')
