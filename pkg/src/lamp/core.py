"""Core model types and exact evaluation for linear additive Markov processes.

A LAMP couples a sparse row-stochastic matrix P with a distribution w over
lags 1..k.  Given a history x_0..x_{t-1}, the next-state law is the
w-weighted mixture of the P rows of the k most recent states, where lags
reaching past the start of the history clamp to x_0:

    Pr[X_t = y | x_0..x_{t-1}] = sum_i w_i * P(x_{max(0, t-i)}, y)

With w = (1, 0, ..., 0) this is an ordinary first-order Markov chain.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "LampError",
    "DataError",
    "NumericError",
    "VocabularyMismatch",
    "EmptyRowError",
    "NonErgodicError",
    "Vocabulary",
    "SparseStochasticMatrix",
    "HistoryDistribution",
    "LampModel",
    "Corpus",
    "LogLikelihood",
    "transition_distribution",
    "log_likelihood",
    "perplexity",
    "generate",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

#: Probability floor used when floor smoothing is requested at evaluation time.
EVALUATION_FLOOR = 1e-10

#: Tolerance on row sums of stored stochastic matrices.
ROW_SUM_TOL = 1e-9


class LampError(Exception):
    """Base class for errors raised by this package."""


class DataError(LampError):
    """Invalid or incompatible input data."""


class NumericError(LampError):
    """Numeric failure: divergence, non-finite values, undefined quantities."""


class VocabularyMismatch(DataError):
    """Model and corpus vocabularies do not agree."""


class EmptyRowError(NumericError):
    """A state with no outgoing transitions was queried during evaluation."""


class NonErgodicError(NumericError):
    """An operation that requires an ergodic matrix received a non-ergodic one."""


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token set mapping token strings to dense integer ids."""

    tokens: tuple[str, ...]
    rare_token: str | None = None

    def __post_init__(self) -> None:
        if len(self.tokens) == 0:
            raise DataError("vocabulary must contain at least one token")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary tokens must be unique")
        if self.rare_token is not None and self.rare_token not in self.tokens:
            raise DataError(f"rare token {self.rare_token!r} is not in the vocabulary")

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], rare_token: str | None = None) -> "Vocabulary":
        return cls(tuple(tokens), rare_token)

    @classmethod
    def from_size(cls, n: int, prefix: str = "s") -> "Vocabulary":
        """Synthetic vocabulary s0..s{n-1}, handy for matrix-level work."""
        return cls(tuple(f"{prefix}{i}" for i in range(n)))

    @cached_property
    def index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise DataError(f"token {token!r} is not in the vocabulary") from None

    def token(self, state: int) -> str:
        if not 0 <= state < len(self.tokens):
            raise DataError(f"state id {state} out of range for vocabulary of size {len(self)}")
        return self.tokens[state]

    @property
    def rare_id(self) -> int | None:
        return None if self.rare_token is None else self.index[self.rare_token]


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SparseStochasticMatrix:
    """Row-stochastic matrix stored as per-row sorted (column, probability) arrays.

    Rows may be empty (a state with no observed outgoing transition); empty
    rows are valid storage but raise :class:`EmptyRowError` when queried by
    evaluation or generation.  Non-empty rows must sum to 1 within 1e-9 and
    every stored probability must be nonnegative.
    """

    n: int
    row_cols: tuple[np.ndarray, ...]
    row_probs: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if self.n <= 0:
            raise DataError("matrix must have at least one state")
        if len(self.row_cols) != self.n or len(self.row_probs) != self.n:
            raise DataError("row arrays must have length n")
        for x, (cols, probs) in enumerate(zip(self.row_cols, self.row_probs)):
            if cols.shape != probs.shape:
                raise DataError(f"row {x}: column and probability arrays differ in length")
            if cols.size == 0:
                continue
            if np.any(cols < 0) or np.any(cols >= self.n):
                raise DataError(f"row {x}: column index out of range")
            if np.any(np.diff(cols) <= 0):
                raise DataError(f"row {x}: columns must be strictly increasing")
            if np.any(probs < 0.0) or not np.all(np.isfinite(probs)):
                raise DataError(f"row {x}: probabilities must be finite and nonnegative")
            s = float(probs.sum())
            if abs(s - 1.0) > ROW_SUM_TOL:
                raise DataError(f"row {x}: probabilities sum to {s!r}, expected 1 within {ROW_SUM_TOL}")

    @classmethod
    def from_rows(cls, n: int, rows: Sequence[Iterable[tuple[int, float]]]) -> "SparseStochasticMatrix":
        """Build from per-row iterables of (column, probability) pairs."""
        row_cols, row_probs = [], []
        for entries in rows:
            entries = sorted(entries)
            cols = _as_readonly(np.array([c for c, _ in entries], dtype=np.int64))
            probs = _as_readonly(np.array([p for _, p in entries], dtype=np.float64))
            row_cols.append(cols)
            row_probs.append(probs)
        return cls(n, tuple(row_cols), tuple(row_probs))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseStochasticMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
            raise DataError("dense matrix must be square")
        n = dense.shape[0]
        rows = [[(int(c), float(dense[x, c])) for c in np.nonzero(dense[x])[0]] for x in range(n)]
        return cls.from_rows(n, rows)

    def row(self, x: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= x < self.n:
            raise DataError(f"state id {x} out of range for matrix of size {self.n}")
        return self.row_cols[x], self.row_probs[x]

    def prob(self, x: int, y: int) -> float:
        cols, probs = self.row(x)
        i = np.searchsorted(cols, y)
        if i < cols.size and cols[i] == y:
            return float(probs[i])
        return 0.0

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        for x in range(self.n):
            out[x, self.row_cols[x]] = self.row_probs[x]
        return out

    def empty_rows(self) -> list[int]:
        return [x for x in range(self.n) if self.row_cols[x].size == 0]

    @property
    def support_size(self) -> int:
        return sum(int(c.size) for c in self.row_cols)

    # Cached flat views used by vectorised lookups and left-multiplication.

    @cached_property
    def _flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rows = np.concatenate(
            [np.full(c.size, x, dtype=np.int64) for x, c in enumerate(self.row_cols)]
        ) if self.support_size else np.empty(0, dtype=np.int64)
        cols = np.concatenate(self.row_cols) if self.support_size else np.empty(0, dtype=np.int64)
        probs = np.concatenate(self.row_probs) if self.support_size else np.empty(0)
        return rows, cols, probs

    @cached_property
    def _pair_keys(self) -> np.ndarray:
        rows, cols, _ = self._flat
        return rows * self.n + cols  # sorted because rows are visited in order and cols ascend

    def pair_indices(self, src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
        """Indices into flat support storage for (src, tgt) pairs, -1 if absent."""
        keys = src.astype(np.int64) * self.n + tgt.astype(np.int64)
        pos = np.searchsorted(self._pair_keys, keys)
        pos = np.minimum(pos, max(self._pair_keys.size - 1, 0))
        if self._pair_keys.size == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        hit = self._pair_keys[pos] == keys
        return np.where(hit, pos, -1)

    def lookup_pairs(self, src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
        """Vectorised P(src, tgt); zero for pairs outside the support."""
        _, _, probs = self._flat
        idx = self.pair_indices(src, tgt)
        out = np.zeros(idx.shape)
        hit = idx >= 0
        out[hit] = probs[idx[hit]]
        return out

    def left_multiply(self, pi: np.ndarray) -> np.ndarray:
        """Row-vector product pi @ P without densifying."""
        rows, cols, probs = self._flat
        out = np.zeros(self.n)
        np.add.at(out, cols, pi[rows] * probs)
        return out

    @cached_property
    def _samplers(self) -> tuple[list[list[int]], list[list[float]]]:
        """Per-row column lists and cumulative probabilities for bisect sampling."""
        col_lists: list[list[int]] = []
        cum_lists: list[list[float]] = []
        for cols, probs in zip(self.row_cols, self.row_probs):
            cum = np.cumsum(probs)
            if cum.size:
                cum[-1] = 1.0  # guard against row sums a few ulp below 1
            col_lists.append([int(c) for c in cols])
            cum_lists.append([float(v) for v in cum])
        return col_lists, cum_lists

    @cached_property
    def _row_lookup(self) -> list[dict[int, float]]:
        return [
            {int(c): float(p) for c, p in zip(cols, probs)}
            for cols, probs in zip(self.row_cols, self.row_probs)
        ]


@dataclass(frozen=True)
class HistoryDistribution:
    """Distribution over lags 1..k with cached first and second moments."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = _as_readonly(np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "weights", w)
        if w.ndim != 1 or w.size == 0:
            raise DataError("lag weights must be a nonempty vector")
        if np.any(w < 0.0) or not np.all(np.isfinite(w)):
            raise DataError("lag weights must be finite and nonnegative")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise DataError(f"lag weights sum to {float(w.sum())!r}, expected 1 within 1e-12")

    @classmethod
    def from_weights(cls, weights: Iterable[float]) -> "HistoryDistribution":
        return cls(np.asarray(list(weights), dtype=np.float64))

    @classmethod
    def uniform(cls, k: int) -> "HistoryDistribution":
        return cls(np.full(k, 1.0 / k))

    @classmethod
    def geometric(cls, decay: float, k: int) -> "HistoryDistribution":
        """Weights proportional to decay**i for i = 1..k."""
        if not 0.0 < decay:
            raise DataError("decay must be positive")
        raw = decay ** np.arange(1, k + 1, dtype=np.float64)
        return cls(raw / raw.sum())

    @classmethod
    def first_order(cls) -> "HistoryDistribution":
        return cls(np.array([1.0]))

    @property
    def k(self) -> int:
        return int(self.weights.size)

    @cached_property
    def mean(self) -> float:
        lags = np.arange(1, self.k + 1, dtype=np.float64)
        return float(lags @ self.weights)

    @cached_property
    def variance(self) -> float:
        lags = np.arange(1, self.k + 1, dtype=np.float64)
        return float((lags * lags) @ self.weights - self.mean**2)

    @cached_property
    def _cum(self) -> list[float]:
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        return [float(v) for v in cum]


@dataclass(frozen=True)
class LampModel:
    """A LAMP: lag distribution w, transition matrix P, token vocabulary."""

    w: HistoryDistribution
    P: SparseStochasticMatrix
    vocab: Vocabulary

    def __post_init__(self) -> None:
        if self.P.n != len(self.vocab):
            raise DataError(
                f"matrix has {self.P.n} states but vocabulary has {len(self.vocab)} tokens"
            )

    @property
    def k(self) -> int:
        return self.w.k

    @property
    def n(self) -> int:
        return self.P.n


@dataclass(frozen=True)
class Corpus:
    """Sequences of state ids over a shared vocabulary."""

    vocab: Vocabulary
    sequences: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        n = len(self.vocab)
        seqs = []
        for s, seq in enumerate(self.sequences):
            seq = _as_readonly(np.asarray(seq, dtype=np.int64))
            if seq.ndim != 1 or seq.size == 0:
                raise DataError(f"sequence {s} is empty; empty sequences cannot be stored")
            if seq.min() < 0 or seq.max() >= n:
                raise DataError(f"sequence {s} contains a state id outside the vocabulary")
            seqs.append(seq)
        object.__setattr__(self, "sequences", tuple(seqs))

    @classmethod
    def from_sequences(cls, vocab: Vocabulary, sequences: Iterable[Iterable[int]]) -> "Corpus":
        return cls(vocab, tuple(np.asarray(list(s), dtype=np.int64) for s in sequences))

    @property
    def total_transitions(self) -> int:
        return sum(int(s.size - 1) for s in self.sequences)

    def __len__(self) -> int:
        return len(self.sequences)


@dataclass(frozen=True)
class LogLikelihood:
    """Natural-log likelihood of a corpus with a per-sequence breakdown.

    Positions whose mixture probability is exactly zero contribute -inf and
    are tallied in ``impossible_transitions``.
    """

    total: float
    per_sequence: tuple[float, ...]
    scored_transitions: int
    impossible_transitions: int


# ---------------------------------------------------------------------------
# Evaluation


def _check_vocab(model_vocab: Vocabulary, corpus_vocab: Vocabulary) -> None:
    if model_vocab is corpus_vocab:
        return
    if model_vocab.tokens != corpus_vocab.tokens:
        raise VocabularyMismatch("model and corpus vocabularies differ")


def _clamped_sources(seq: np.ndarray, j: int, k: int) -> Iterable[int]:
    """State ids x_{max(0, j-i)} for lags i = 1..k."""
    for i in range(1, k + 1):
        yield int(seq[j - i]) if j - i >= 0 else int(seq[0])


def transition_distribution(model: LampModel, history: Sequence[int]) -> np.ndarray:
    """Next-state distribution given a nonempty history of state ids.

    Lags that reach past the start of the history clamp to its first element.
    Entries older than k steps never influence the result.
    """
    if len(history) == 0:
        raise DataError("history must contain at least one state")
    n = model.n
    hist = np.asarray(history, dtype=np.int64)
    if hist.min() < 0 or hist.max() >= n:
        raise DataError("history contains a state id outside the vocabulary")
    out = np.zeros(n)
    L = len(hist)
    w = model.w.weights
    for i in range(1, model.k + 1):
        src = int(hist[L - i]) if i <= L else int(hist[0])
        cols, probs = model.P.row(src)
        if cols.size == 0:
            raise EmptyRowError(f"state {src} has no outgoing transitions")
        out[cols] += w[i - 1] * probs
    return out


def _sequence_log_likelihood(
    model: LampModel, seq: np.ndarray, floor: float | None
) -> tuple[float, int]:
    """(natural-log likelihood, impossible count) for one sequence."""
    w = model.w.weights
    k = model.k
    n = model.n
    lookup = model.P._row_lookup
    total = 0.0
    impossible = 0
    for j in range(1, seq.size):
        tgt = int(seq[j])
        if floor is None:
            p = 0.0
            for i, src in enumerate(_clamped_sources(seq, j, k)):
                row = lookup[src]
                if not row:
                    raise EmptyRowError(f"state {src} has no outgoing transitions")
                p += w[i] * row.get(tgt, 0.0)
            if p <= 0.0:
                impossible += 1
                total = -math.inf
            elif total != -math.inf:
                total += math.log(p)
        else:
            # Floor smoothing: raise every state's probability to at least
            # `floor`, then renormalise the full distribution.
            acc: dict[int, float] = {}
            for i, src in enumerate(_clamped_sources(seq, j, k)):
                for col, prob in lookup[src].items():
                    acc[col] = acc.get(col, 0.0) + w[i] * prob
            mass = sum(acc.values())
            lift = sum(floor - v for v in acc.values() if v < floor)
            norm = mass + lift + (n - len(acc)) * floor
            p = max(acc.get(tgt, 0.0), floor) / norm
            total += math.log(p)
    return total, impossible


def log_likelihood(
    model: LampModel, corpus: Corpus, floor: float | None = None
) -> LogLikelihood:
    """Natural-log likelihood of a corpus under the model.

    Every position j >= 1 of every sequence is scored, including the early
    positions where lags clamp to the first element.  Passing
    ``floor=EVALUATION_FLOOR`` enables floor smoothing so that no scored
    transition has probability zero.
    """
    _check_vocab(model.vocab, corpus.vocab)
    per_seq = []
    impossible = 0
    for seq in corpus.sequences:
        ll, imp = _sequence_log_likelihood(model, seq, floor)
        per_seq.append(ll)
        impossible += imp
    finite = [v for v in per_seq if v != -math.inf]
    total = -math.inf if impossible else float(sum(finite))
    return LogLikelihood(
        total=total,
        per_sequence=tuple(per_seq),
        scored_transitions=corpus.total_transitions,
        impossible_transitions=impossible,
    )


def perplexity(model: LampModel, corpus: Corpus, floor: float | None = None) -> float:
    """Perplexity 2**(-L2/T) where L2 is the base-2 log-likelihood and T the
    number of scored transitions.  Equals exp(-L/T) for the natural-log L.

    Returns +inf when any scored transition is impossible and floor smoothing
    is off.
    """
    ll = log_likelihood(model, corpus, floor=floor)
    if ll.scored_transitions == 0:
        raise DataError("perplexity requires at least one scored transition")
    if ll.impossible_transitions > 0:
        return math.inf
    return math.exp(-ll.total / ll.scored_transitions)


# ---------------------------------------------------------------------------
# Generation


def _generate_ids(
    w: HistoryDistribution,
    samplers_per_lag: list[tuple[list[list[int]], list[list[float]]]],
    start: int,
    length: int,
    seed: int,
) -> np.ndarray:
    """Shared sampling loop: one lag draw and one row draw per step."""
    if length < 1:
        raise DataError("length must be at least 1")
    rng = np.random.default_rng(seed)
    seq = [start]
    if length == 1:
        return np.asarray(seq, dtype=np.int64)
    m = length - 1
    # One row of uniforms per step, so a longer run with the same seed
    # extends a shorter one without changing its prefix.
    u = rng.random((m, 2))
    u_lag, u_row = u[:, 0], u[:, 1]
    cum_w = w._cum
    for t in range(m):
        lag = bisect.bisect_right(cum_w, u_lag[t]) + 1
        pos = len(seq)
        src = seq[pos - lag] if lag <= pos else seq[0]
        col_lists, cum_lists = samplers_per_lag[lag - 1]
        cum = cum_lists[src]
        if not cum:
            raise EmptyRowError(f"state {src} has no outgoing transitions")
        seq.append(col_lists[src][bisect.bisect_right(cum, u_row[t])])
    return np.asarray(seq, dtype=np.int64)


def generate(model: LampModel, start: int, length: int, seed: int) -> np.ndarray:
    """Sample a sequence of ``length`` state ids beginning with ``start``.

    Each step draws a lag from w, takes the clamped historical state at that
    lag, and samples the next state from that state's P row.  Deterministic
    for a fixed seed.
    """
    if not 0 <= start < model.n:
        raise DataError(f"start state {start} out of range")
    samplers = [model.P._samplers] * model.k
    return _generate_ids(model.w, samplers, start, length, seed)


# ---------------------------------------------------------------------------
# Serialization


def model_to_dict(model: LampModel) -> dict:
    """JSON-ready document: {"k", "w", "n", "vocab", "matrix"} with the matrix
    flattened to [row, col, prob] triples in row-major order."""
    triples = []
    for x in range(model.n):
        cols, probs = model.P.row(x)
        triples.extend([int(x), int(c), float(p)] for c, p in zip(cols, probs))
    doc = {
        "k": model.k,
        "w": [float(v) for v in model.w.weights],
        "n": model.n,
        "vocab": list(model.vocab.tokens),
        "matrix": triples,
    }
    if model.vocab.rare_token is not None:
        doc["rare_token"] = model.vocab.rare_token
    return doc


def model_from_dict(doc: dict) -> LampModel:
    try:
        k = int(doc["k"])
        w = [float(v) for v in doc["w"]]
        n = int(doc["n"])
        tokens = [str(t) for t in doc["vocab"]]
        triples = doc["matrix"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model document: {exc}") from exc
    if len(w) != k:
        raise DataError(f"model document declares k={k} but has {len(w)} lag weights")
    if len(tokens) != n:
        raise DataError(f"model document declares n={n} but has {len(tokens)} tokens")
    rows: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for entry in triples:
        r, c, p = int(entry[0]), int(entry[1]), float(entry[2])
        if not (0 <= r < n and 0 <= c < n):
            raise DataError(f"matrix entry ({r}, {c}) out of range")
        rows[r].append((c, p))
    vocab = Vocabulary.from_tokens(tokens, doc.get("rare_token"))
    return LampModel(
        w=HistoryDistribution.from_weights(w),
        P=SparseStochasticMatrix.from_rows(n, rows),
        vocab=vocab,
    )


def save_model(model: LampModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(path: str) -> LampModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}") from exc
    if "matrices" in doc:
        raise DataError(
            f"{path} stores a per-lag generalized model; load it with the glamp module"
        )
    return model_from_dict(doc)
