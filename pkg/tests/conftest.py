"""Shared test helpers: independent dense reference implementations and
random instance builders.

The reference functions here are deliberately naive.  They work on dense
numpy matrices and raw weight vectors, follow the defining equations term by
term, and share no code with the package, so they can serve as oracles for
the optimized implementations.
"""

from __future__ import annotations

import math

import numpy as np

from lamp.core import (
    Corpus,
    HistoryDistribution,
    LampModel,
    SparseStochasticMatrix,
    Vocabulary,
)


# ---------------------------------------------------------------------------
# Naive dense reference implementations


def ref_transition_distribution(w, P_dense, history):
    """Mixture of P rows of the clamped last-k states; w may be any length."""
    P_dense = np.asarray(P_dense, dtype=np.float64)
    n = P_dense.shape[0]
    out = np.zeros(n)
    L = len(history)
    for i in range(1, len(w) + 1):
        src = history[L - i] if i <= L else history[0]
        out += w[i - 1] * P_dense[src]
    return out


def ref_log_likelihood(w, P_dense, sequences):
    """(total natural-log likelihood, impossible count) scored from j = 1.

    Accepts raw (not necessarily normalized) w and P so it can double as the
    function under finite differences.
    """
    total = 0.0
    impossible = 0
    for seq in sequences:
        for j in range(1, len(seq)):
            p = 0.0
            for i in range(1, len(w) + 1):
                src = seq[j - i] if j - i >= 0 else seq[0]
                p += w[i - 1] * P_dense[src][seq[j]]
            if p <= 0.0:
                impossible += 1
                total = -math.inf
            elif total != -math.inf:
                total += math.log(p)
    return total, impossible


def ref_perplexity(w, P_dense, sequences):
    total, impossible = ref_log_likelihood(w, P_dense, sequences)
    T = sum(len(s) - 1 for s in sequences)
    if impossible:
        return math.inf
    return math.exp(-total / T)


def fd_grad_w(w, P_dense, sequences, h=1e-6):
    """Central finite differences of the log-likelihood in raw w coordinates,
    without renormalizing the perturbed weight vector."""
    w = np.asarray(w, dtype=np.float64)
    g = np.zeros_like(w)
    for i in range(w.size):
        hi = w.copy()
        lo = w.copy()
        hi[i] += h
        lo[i] -= h
        g[i] = (ref_log_likelihood(hi, P_dense, sequences)[0]
                - ref_log_likelihood(lo, P_dense, sequences)[0]) / (2 * h)
    return g


def fd_grad_P(w, P_dense, sequences, entries, h=1e-6):
    """Central finite differences for selected (row, col) entries of P,
    perturbing the raw entry without renormalizing the row."""
    P_dense = np.asarray(P_dense, dtype=np.float64)
    out = {}
    for (r, c) in entries:
        hi = P_dense.copy()
        lo = P_dense.copy()
        hi[r, c] += h
        lo[r, c] -= h
        out[(r, c)] = (ref_log_likelihood(w, hi, sequences)[0]
                       - ref_log_likelihood(w, lo, sequences)[0]) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# Instance builders


def make_model(w, P_dense, rare_token=None):
    """LampModel from a weight list and dense matrix, with a synthetic vocab."""
    P_dense = np.asarray(P_dense, dtype=np.float64)
    n = P_dense.shape[0]
    tokens = tuple(f"s{i}" for i in range(n))
    return LampModel(
        w=HistoryDistribution.from_weights(w),
        P=SparseStochasticMatrix.from_dense(P_dense),
        vocab=Vocabulary(tokens, rare_token),
    )


def make_corpus(vocab_or_model, sequences):
    vocab = getattr(vocab_or_model, "vocab", vocab_or_model)
    return Corpus.from_sequences(vocab, sequences)


def worked_matrix():
    """The 2-state worked instance used across the suite."""
    return np.array([[0.9, 0.1], [0.2, 0.8]])


def cycle_matrix(n, eps):
    """Cycle on n states: row x goes to x+1 mod n, except state 0 keeps a
    self-loop of mass eps.  eps = 0 is the pure deterministic cycle, under
    which a state can repeat twice in a row but never three times."""
    P = np.zeros((n, n))
    for x in range(1, n):
        P[x, (x + 1) % n] = 1.0
    P[0, 0] = eps
    P[0, 1] = 1.0 - eps
    return P


def random_stochastic_matrix(rng, n, min_entry=0.0):
    """Dense random row-stochastic matrix; positive min_entry makes it ergodic."""
    raw = rng.random((n, n)) + min_entry
    return raw / raw.sum(axis=1, keepdims=True)


def random_simplex(rng, k):
    raw = rng.random(k) + 1e-3
    return raw / raw.sum()


def random_sequences(rng, n, n_seqs, max_len, min_len=2):
    return [
        rng.integers(0, n, size=rng.integers(min_len, max_len + 1)).tolist()
        for _ in range(n_seqs)
    ]
