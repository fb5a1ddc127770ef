"""Core model types and evaluation semantics."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import lamp.core as core
from lamp.core import (
    Corpus,
    DataError,
    EmptyRowError,
    HistoryDistribution,
    LampModel,
    SparseStochasticMatrix,
    Vocabulary,
    VocabularyMismatch,
)
from conftest import (
    cycle_matrix,
    make_corpus,
    make_model,
    random_simplex,
    random_stochastic_matrix,
    ref_log_likelihood,
    ref_transition_distribution,
    worked_matrix,
)

W2 = [0.6, 0.4]

# Frozen by hand from the defining mixture and cross-checked against the
# naive reference implementation below.
WORKED_LL = math.log(0.1) + math.log(0.52)          # -2.95651156040071
WORKED_PPL = (0.1 * 0.52) ** -0.5                   # 4.385290096535146


def worked_model():
    return make_model(W2, worked_matrix())


# ---------------------------------------------------------------------------
# Types


def test_vocabulary_basics():
    v = Vocabulary.from_tokens(["a", "b", "c"], rare_token="c")
    assert len(v) == 3
    assert v.id("b") == 1
    assert v.token(2) == "c"
    assert v.rare_id == 2
    assert "a" in v and "z" not in v


def test_vocabulary_validation():
    with pytest.raises(DataError):
        Vocabulary.from_tokens([])
    with pytest.raises(DataError):
        Vocabulary.from_tokens(["a", "a"])
    with pytest.raises(DataError):
        Vocabulary.from_tokens(["a"], rare_token="missing")
    with pytest.raises(DataError):
        Vocabulary.from_tokens(["a"]).id("b")
    with pytest.raises(DataError):
        Vocabulary.from_tokens(["a"]).token(5)


def test_matrix_validation():
    with pytest.raises(DataError):
        SparseStochasticMatrix.from_rows(2, [[(0, 0.5), (1, 0.6)], [(0, 1.0)]])
    with pytest.raises(DataError):
        SparseStochasticMatrix.from_rows(2, [[(0, -0.1), (1, 1.1)], [(0, 1.0)]])
    with pytest.raises(DataError):
        SparseStochasticMatrix.from_rows(2, [[(0, 0.5), (0, 0.5)], [(0, 1.0)]])
    with pytest.raises(DataError):
        SparseStochasticMatrix.from_rows(2, [[(5, 1.0)], [(0, 1.0)]])


def test_matrix_accessors_and_empty_rows():
    m = SparseStochasticMatrix.from_rows(3, [[(1, 1.0)], [], [(0, 0.25), (2, 0.75)]])
    assert m.prob(0, 1) == 1.0
    assert m.prob(0, 0) == 0.0
    assert m.empty_rows() == [1]
    assert m.support_size == 3
    np.testing.assert_allclose(
        m.dense(), [[0, 1, 0], [0, 0, 0], [0.25, 0, 0.75]]
    )


def test_matrix_pair_lookup():
    rng = np.random.default_rng(7)
    P = random_stochastic_matrix(rng, 5, min_entry=0.01)
    m = SparseStochasticMatrix.from_dense(P)
    src = rng.integers(0, 5, size=40)
    tgt = rng.integers(0, 5, size=40)
    np.testing.assert_allclose(m.lookup_pairs(src, tgt), P[src, tgt], atol=0)


def test_matrix_left_multiply():
    rng = np.random.default_rng(8)
    P = random_stochastic_matrix(rng, 6, min_entry=0.0)
    m = SparseStochasticMatrix.from_dense(P)
    pi = random_simplex(rng, 6)
    np.testing.assert_allclose(m.left_multiply(pi), pi @ P, atol=1e-15)


def test_history_distribution_moments():
    w = HistoryDistribution.from_weights([0.5, 0.5])
    assert w.k == 2
    assert w.mean == pytest.approx(1.5, abs=1e-15)
    assert w.variance == pytest.approx(0.25, abs=1e-15)
    g = HistoryDistribution.geometric(0.8, 3)
    raw = np.array([0.8, 0.64, 0.512])
    np.testing.assert_allclose(g.weights, raw / raw.sum(), atol=1e-15)


def test_history_distribution_validation():
    with pytest.raises(DataError):
        HistoryDistribution.from_weights([])
    with pytest.raises(DataError):
        HistoryDistribution.from_weights([0.5, 0.6])
    with pytest.raises(DataError):
        HistoryDistribution.from_weights([-0.5, 1.5])


def test_corpus_validation():
    v = Vocabulary.from_size(2)
    with pytest.raises(DataError):
        Corpus.from_sequences(v, [[0, 1], []])
    with pytest.raises(DataError):
        Corpus.from_sequences(v, [[0, 3]])
    c = Corpus.from_sequences(v, [[0, 1, 1], [1]])
    assert c.total_transitions == 2
    assert len(c) == 2


def test_model_requires_matching_sizes():
    with pytest.raises(DataError):
        LampModel(
            w=HistoryDistribution.first_order(),
            P=SparseStochasticMatrix.from_dense(np.eye(2)),
            vocab=Vocabulary.from_size(3),
        )


# ---------------------------------------------------------------------------
# transition_distribution


def test_transition_distribution_worked_example():
    model = worked_model()
    dist = core.transition_distribution(model, [0, 1])
    np.testing.assert_allclose(dist, [0.48, 0.52], atol=1e-12)
    np.testing.assert_allclose(
        dist, ref_transition_distribution(W2, worked_matrix(), [0, 1]), atol=0
    )


def test_transition_distribution_clamps_short_history():
    model = worked_model()
    # Both lags clamp to the single historical state.
    np.testing.assert_allclose(
        core.transition_distribution(model, [0]), [0.9, 0.1], atol=1e-15
    )


def test_transition_distribution_matches_reference():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(2, 6))
        k = int(rng.integers(1, 5))
        P = random_stochastic_matrix(rng, n, min_entry=0.01)
        w = random_simplex(rng, k)
        model = make_model(w, P)
        hist = rng.integers(0, n, size=rng.integers(1, 8)).tolist()
        got = core.transition_distribution(model, hist)
        np.testing.assert_allclose(
            got, ref_transition_distribution(w, P, hist), atol=1e-14
        )
        assert got.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(got >= 0)


@settings(max_examples=60, deadline=None)
@given(
    data=st.data(),
    k=st.integers(min_value=1, max_value=4),
    extra=st.integers(min_value=1, max_value=5),
)
def test_transition_distribution_ignores_states_older_than_k(data, k, extra):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    n = 4
    model = make_model(random_simplex(rng, k), random_stochastic_matrix(rng, n, 0.01))
    hist = rng.integers(0, n, size=k).tolist()
    prefix = rng.integers(0, n, size=extra).tolist()
    a = core.transition_distribution(model, hist)
    b = core.transition_distribution(model, prefix + hist)
    np.testing.assert_array_equal(a, b)


def test_transition_distribution_errors():
    model = worked_model()
    with pytest.raises(DataError):
        core.transition_distribution(model, [])
    with pytest.raises(DataError):
        core.transition_distribution(model, [0, 9])
    holey = make_model([1.0], np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(EmptyRowError):
        core.transition_distribution(holey, [1])


# ---------------------------------------------------------------------------
# log_likelihood and perplexity


def test_log_likelihood_worked_example():
    model = worked_model()
    corpus = make_corpus(model, [[0, 1, 1]])
    ll = core.log_likelihood(model, corpus)
    assert ll.total == pytest.approx(WORKED_LL, abs=1e-12)
    assert ll.scored_transitions == 2
    assert ll.impossible_transitions == 0
    assert ll.per_sequence == (ll.total,)
    ref_total, ref_imp = ref_log_likelihood(W2, worked_matrix(), [[0, 1, 1]])
    assert ll.total == pytest.approx(ref_total, abs=1e-12)
    assert ref_imp == 0


def test_log_likelihood_matches_reference():
    rng = np.random.default_rng(13)
    for _ in range(40):
        n = int(rng.integers(2, 5))
        k = int(rng.integers(1, 4))
        P = random_stochastic_matrix(rng, n, min_entry=0.02)
        w = random_simplex(rng, k)
        model = make_model(w, P)
        seqs = [
            rng.integers(0, n, size=rng.integers(2, 7)).tolist()
            for _ in range(int(rng.integers(1, 4)))
        ]
        got = core.log_likelihood(model, make_corpus(model, seqs))
        want, imp = ref_log_likelihood(w, P, seqs)
        assert imp == 0
        assert got.total == pytest.approx(want, abs=1e-11)
        assert got.total == pytest.approx(sum(got.per_sequence), abs=1e-11)


def test_log_likelihood_single_element_sequences():
    model = worked_model()
    ll = core.log_likelihood(model, make_corpus(model, [[0], [1]]))
    assert ll.total == 0.0
    assert ll.scored_transitions == 0
    assert ll.impossible_transitions == 0


def test_log_likelihood_impossible_transition():
    # P(0, 0) = 0, so the sequence [0, 0] is impossible under w = (1).
    model = make_model([1.0], np.array([[0.0, 1.0], [0.5, 0.5]]))
    corpus = make_corpus(model, [[0, 0], [0, 1]])
    ll = core.log_likelihood(model, corpus)
    assert ll.total == -math.inf
    assert ll.impossible_transitions == 1
    assert ll.per_sequence[0] == -math.inf
    assert ll.per_sequence[1] == pytest.approx(math.log(1.0), abs=1e-15)
    assert core.perplexity(model, corpus) == math.inf


def test_floor_smoothing_matches_dense_recomputation():
    floor = core.EVALUATION_FLOOR
    model = make_model([1.0], np.array([[0.0, 1.0], [0.5, 0.5]]))
    corpus = make_corpus(model, [[0, 0], [1, 0, 1]])
    got = core.log_likelihood(model, corpus, floor=floor)
    # Recompute naively: lift every state to the floor, renormalize.
    P = np.array([[0.0, 1.0], [0.5, 0.5]])
    want = 0.0
    for seq in [[0, 0], [1, 0, 1]]:
        for j in range(1, len(seq)):
            dist = ref_transition_distribution([1.0], P, seq[:j])
            dist = np.maximum(dist, floor)
            want += math.log(dist[seq[j]] / dist.sum())
    assert got.total == pytest.approx(want, rel=1e-12)
    assert got.impossible_transitions == 0
    assert core.perplexity(model, corpus, floor=floor) < math.inf


def test_floor_smoothing_covers_empty_rows():
    # State 1 has no outgoing transitions: plain evaluation refuses, the
    # floored evaluation treats the row as all zeros and still normalizes.
    model = make_model([1.0], np.array([[0.0, 1.0], [0.0, 0.0]]))
    corpus = make_corpus(model, [[1, 0]])
    with pytest.raises(EmptyRowError):
        core.log_likelihood(model, corpus)
    got = core.log_likelihood(model, corpus, floor=core.EVALUATION_FLOOR)
    assert got.total == pytest.approx(math.log(0.5), abs=1e-9)


def test_perplexity_worked_example():
    model = worked_model()
    ppl = core.perplexity(model, make_corpus(model, [[0, 1, 1]]))
    assert ppl == pytest.approx(WORKED_PPL, abs=1e-12)
    # Base-2 definition: 2 ** (-L2 / T) with L2 the base-2 log-likelihood.
    l2 = WORKED_LL / math.log(2.0)
    assert ppl == pytest.approx(2.0 ** (-l2 / 2), rel=1e-14)


def test_perplexity_uniform_matrix_is_vocab_size():
    n = 5
    P = np.full((n, n), 1.0 / n)
    for w in ([1.0], [0.3, 0.7], [0.2, 0.2, 0.6]):
        model = make_model(w, P)
        corpus = make_corpus(model, [[0, 1, 2, 3, 4, 0, 2]])
        assert core.perplexity(model, corpus) == pytest.approx(5.0, rel=1e-12)


def test_perplexity_requires_scored_transitions():
    model = worked_model()
    with pytest.raises(DataError):
        core.perplexity(model, make_corpus(model, [[0]]))


def test_first_order_reduction():
    rng = np.random.default_rng(17)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        k = int(rng.integers(1, 5))
        P = random_stochastic_matrix(rng, n, min_entry=0.02)
        w = [1.0] + [0.0] * (k - 1)
        model = make_model(w, P)
        seq = rng.integers(0, n, size=10).tolist()
        got = core.log_likelihood(model, make_corpus(model, [seq]))
        want = sum(math.log(P[seq[j - 1], seq[j]]) for j in range(1, len(seq)))
        assert got.total == pytest.approx(want, abs=1e-12)


def test_vocab_mismatch_rejected():
    model = worked_model()
    other = Corpus.from_sequences(Vocabulary.from_tokens(["x", "y"]), [[0, 1]])
    with pytest.raises(VocabularyMismatch):
        core.log_likelihood(model, other)


# ---------------------------------------------------------------------------
# generate


def test_generate_is_deterministic_and_well_formed():
    model = worked_model()
    a = core.generate(model, start=0, length=200, seed=42)
    b = core.generate(model, start=0, length=200, seed=42)
    c = core.generate(model, start=0, length=200, seed=43)
    np.testing.assert_array_equal(a, b)
    assert a.size == 200
    assert a[0] == 0
    assert not np.array_equal(a, c)
    assert set(np.unique(a)) <= {0, 1}


def test_generate_length_one_is_start():
    model = worked_model()
    np.testing.assert_array_equal(core.generate(model, 1, 1, 0), [1])


def test_generate_prefix_extension():
    model = worked_model()
    short = core.generate(model, 0, 50, seed=5)
    long = core.generate(model, 0, 400, seed=5)
    np.testing.assert_array_equal(long[:50], short)


def test_generate_single_step_frequencies():
    # With k = 1 the second element is a draw from P(start, .).
    rng_checks = np.random.default_rng(0)
    P = random_stochastic_matrix(rng_checks, 3, min_entry=0.05)
    model = make_model([1.0], P)
    draws = np.array([core.generate(model, 0, 2, seed=s)[1] for s in range(4000)])
    freq = np.bincount(draws, minlength=3) / 4000
    np.testing.assert_allclose(freq, P[0], atol=0.03)


def test_generate_empty_row_error():
    model = make_model([1.0], np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(EmptyRowError):
        core.generate(model, 0, 10, seed=1)


def test_cycle_double_but_never_triple_repeats():
    # Deterministic cycle with a two-lag mixture: lag 2 can reproduce the
    # current state once, but from a doubled state both lags point at the
    # same row, which cannot repeat it again.
    model = make_model([0.5, 0.5], cycle_matrix(6, eps=0.0))
    seq = core.generate(model, 0, 1_000_000, seed=123)
    same1 = seq[1:] == seq[:-1]
    doubles = int(np.count_nonzero(same1))
    triples = int(np.count_nonzero(same1[1:] & same1[:-1]))
    assert triples == 0
    assert doubles >= 1


# ---------------------------------------------------------------------------
# serialization


def test_model_round_trip_exact():
    rng = np.random.default_rng(23)
    for _ in range(10):
        n = int(rng.integers(2, 6))
        k = int(rng.integers(1, 4))
        model = make_model(
            random_simplex(rng, k),
            random_stochastic_matrix(rng, n, min_entry=0.0),
            rare_token="s0" if rng.random() < 0.5 else None,
        )
        doc = json.loads(json.dumps(core.model_to_dict(model)))
        back = core.model_from_dict(doc)
        np.testing.assert_array_equal(back.w.weights, model.w.weights)
        assert back.vocab.tokens == model.vocab.tokens
        assert back.vocab.rare_token == model.vocab.rare_token
        for x in range(n):
            np.testing.assert_array_equal(back.P.row_cols[x], model.P.row_cols[x])
            np.testing.assert_array_equal(back.P.row_probs[x], model.P.row_probs[x])


def test_model_file_round_trip(tmp_path):
    model = worked_model()
    path = tmp_path / "model.json"
    core.save_model(model, str(path))
    back = core.load_model(str(path))
    np.testing.assert_array_equal(back.w.weights, model.w.weights)
    doc = json.loads(path.read_text())
    assert set(doc) == {"k", "w", "n", "vocab", "matrix"}
    assert doc["matrix"] == sorted(doc["matrix"])


def test_model_document_validation():
    with pytest.raises(DataError):
        core.model_from_dict({"k": 1})
    good = core.model_to_dict(worked_model())
    bad = dict(good, w=[1.0])
    with pytest.raises(DataError):
        core.model_from_dict(bad)
    bad = dict(good, matrix=[[0, 7, 1.0]])
    with pytest.raises(DataError):
        core.model_from_dict(bad)


def test_load_model_rejects_per_lag_documents(tmp_path):
    doc = core.model_to_dict(worked_model())
    doc["matrices"] = []
    path = tmp_path / "g.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError):
        core.load_model(str(path))
