"""Corpus loading and preprocessing: whitespace-token text files, repeat
collapsing, rare-token thresholding, deterministic train/test splitting,
and a JSON cache for preprocessed corpora.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from lamp.core import Corpus, DataError, Vocabulary

__all__ = [
    "LoadReport",
    "PreprocessConfig",
    "PreprocessReport",
    "load_corpus",
    "save_corpus_cache",
    "load_corpus_cache",
    "encode_tokens",
    "decode_ids",
    "token_counts",
    "collapse_repeats",
    "apply_rare_threshold",
    "preprocess",
    "split",
    "kfold_split",
]


@dataclass(frozen=True)
class LoadReport:
    """What a text load saw: kept sequences, token instances, skipped blanks."""

    n_sequences: int
    n_tokens: int
    skipped_empty_lines: int


def load_corpus(path: str, limit: int | None = None, return_report: bool = False):
    """Read a corpus as UTF-8 text: one sequence per line, whitespace tokens.

    Token ids are assigned in order of first appearance.  Blank lines are
    skipped and counted in the report.  ``limit`` keeps only the first that
    many nonempty lines.
    """
    if limit is not None and limit < 1:
        raise DataError("limit must be at least 1 when given")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"corpus file {path} is not valid UTF-8: {exc}") from exc
    index: dict[str, int] = {}
    sequences: list[list[int]] = []
    skipped = 0
    n_tokens = 0
    for line in lines:
        tokens = line.split()
        if not tokens:
            skipped += 1
            continue
        if limit is not None and len(sequences) == limit:
            break
        seq = []
        for tok in tokens:
            if tok not in index:
                index[tok] = len(index)
            seq.append(index[tok])
        n_tokens += len(seq)
        sequences.append(seq)
    if not sequences:
        raise DataError(f"corpus file {path} contains no nonempty lines")
    vocab = Vocabulary.from_tokens(index)
    corpus = Corpus.from_sequences(vocab, sequences)
    if return_report:
        return corpus, LoadReport(
            n_sequences=len(sequences), n_tokens=n_tokens, skipped_empty_lines=skipped
        )
    return corpus


# ---------------------------------------------------------------------------
# JSON cache


def save_corpus_cache(corpus: Corpus, path: str) -> None:
    """Write a corpus as compact JSON: token list plus integer sequences."""
    doc = {
        "vocab": list(corpus.vocab.tokens),
        "sequences": [[int(x) for x in seq] for seq in corpus.sequences],
    }
    if corpus.vocab.rare_token is not None:
        doc["rare_token"] = corpus.vocab.rare_token
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_corpus_cache(path: str) -> Corpus:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read corpus cache {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corpus cache {path} is not valid JSON: {exc}") from exc
    try:
        tokens = [str(t) for t in doc["vocab"]]
        sequences = doc["sequences"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed corpus cache: {exc}") from exc
    vocab = Vocabulary.from_tokens(tokens, doc.get("rare_token"))
    return Corpus.from_sequences(vocab, sequences)


# ---------------------------------------------------------------------------
# Token mapping


def encode_tokens(vocab: Vocabulary, tokens: Sequence[str]) -> list[int]:
    """Map token strings to ids; unknown tokens fall back to the rare id."""
    rare = vocab.rare_id
    ids = []
    for tok in tokens:
        if tok in vocab:
            ids.append(vocab.index[tok])
        elif rare is not None:
            ids.append(rare)
        else:
            raise DataError(
                f"token {tok!r} is not in the vocabulary and no rare token is set"
            )
    return ids


def decode_ids(vocab: Vocabulary, ids: Sequence[int]) -> list[str]:
    return [vocab.token(int(x)) for x in ids]


def token_counts(corpus: Corpus) -> np.ndarray:
    """Occurrences of each token id across all sequences."""
    counts = np.zeros(len(corpus.vocab), dtype=np.int64)
    for seq in corpus.sequences:
        counts += np.bincount(seq, minlength=len(corpus.vocab))
    return counts


# ---------------------------------------------------------------------------
# Transforms


def collapse_repeats(corpus: Corpus) -> Corpus:
    """Squash runs of identical consecutive ids to one occurrence each.

    The vocabulary is unchanged and the transform is idempotent.
    """
    collapsed = []
    for seq in corpus.sequences:
        keep = np.ones(len(seq), dtype=bool)
        keep[1:] = seq[1:] != seq[:-1]
        collapsed.append(seq[keep])
    return Corpus.from_sequences(corpus.vocab, collapsed)


def apply_rare_threshold(
    corpus: Corpus,
    min_count: int,
    rare_label: str = "<RARE>",
    counts: np.ndarray | None = None,
) -> Corpus:
    """Replace tokens occurring fewer than ``min_count`` times with a rare
    token and rebuild the vocabulary densely.

    ``counts`` supplies the occurrence counts to threshold on (the pipeline
    passes pre-collapse counts); by default they are taken from ``corpus``
    itself.  Surviving tokens keep their relative order; the rare label is
    appended unless it is already a surviving token, in which case that id
    doubles as the sink.  With nothing below the threshold the corpus is
    returned unchanged.
    """
    if min_count < 0:
        raise DataError("min_count must be nonnegative")
    n = len(corpus.vocab)
    if counts is None:
        counts = token_counts(corpus)
    counts = np.asarray(counts)
    if counts.shape != (n,):
        raise DataError(f"counts must have one entry per token (expected {n})")
    rare_ids = counts < min_count
    if min_count == 0 or not bool(rare_ids.any()):
        return corpus
    survivors = [t for t, is_rare in zip(corpus.vocab.tokens, rare_ids) if not is_rare]
    if rare_label not in survivors:
        survivors.append(rare_label)
    vocab = Vocabulary.from_tokens(survivors, rare_label)
    new_id = np.empty(n, dtype=np.int64)
    for old, tok in enumerate(corpus.vocab.tokens):
        new_id[old] = vocab.index[rare_label if rare_ids[old] else tok]
    return Corpus.from_sequences(vocab, [new_id[seq] for seq in corpus.sequences])


@dataclass(frozen=True)
class PreprocessConfig:
    """Pipeline switches: repeat collapsing, rare thresholding, splitting."""

    collapse_repeats: bool = False
    rare_min_count: int = 0
    rare_token_label: str = "<RARE>"
    split_fraction: float = 0.9
    split_seed: int = 0

    def __post_init__(self) -> None:
        if self.rare_min_count < 0:
            raise DataError("rare_min_count must be nonnegative")
        if not 0.0 < self.split_fraction < 1.0:
            raise DataError("split_fraction must lie strictly between 0 and 1")
        if not self.rare_token_label:
            raise DataError("rare_token_label must be nonempty")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PreprocessConfig":
        try:
            return cls(**doc)
        except TypeError as exc:
            raise DataError(f"malformed preprocess config: {exc}") from exc


@dataclass(frozen=True)
class PreprocessReport:
    n_sequences_in: int
    n_sequences_out: int
    dropped_short_sequences: int
    rare_token_types: int
    vocab_size_in: int
    vocab_size_out: int


def preprocess(corpus: Corpus, cfg: PreprocessConfig) -> tuple[Corpus, PreprocessReport]:
    """Collapse, threshold, re-collapse, and drop too-short sequences.

    Rare thresholding always uses token counts from the original corpus,
    taken before any collapsing.  Rare replacement can create new adjacent
    repeats, so collapsing runs again afterwards.  Sequences reduced below
    two tokens are dropped (they carry no scored transition).
    """
    original_counts = token_counts(corpus)
    vocab_in = len(corpus.vocab)
    out = corpus
    if cfg.collapse_repeats:
        out = collapse_repeats(out)
    if cfg.rare_min_count > 0:
        out = apply_rare_threshold(
            out, cfg.rare_min_count, cfg.rare_token_label, counts=original_counts
        )
        if cfg.collapse_repeats:
            out = collapse_repeats(out)
    kept = [seq for seq in out.sequences if len(seq) >= 2]
    dropped = len(out.sequences) - len(kept)
    if not kept:
        raise DataError("preprocessing dropped every sequence")
    if dropped:
        out = Corpus.from_sequences(out.vocab, kept)
    rare_types = int((original_counts < cfg.rare_min_count).sum()) if cfg.rare_min_count else 0
    report = PreprocessReport(
        n_sequences_in=len(corpus.sequences),
        n_sequences_out=len(out.sequences),
        dropped_short_sequences=dropped,
        rare_token_types=rare_types,
        vocab_size_in=vocab_in,
        vocab_size_out=len(out.vocab),
    )
    return out, report


# ---------------------------------------------------------------------------
# Splitting


def _project(
    corpus: Corpus,
    train_idx: list[int],
    test_idx: list[int],
    rare_label: str,
) -> tuple[Corpus, Corpus]:
    """Build train/test corpora over the train side's vocabulary.

    Tokens appearing only on the test side map to the rare token.  Both
    corpora share one vocabulary object.
    """
    seen = np.zeros(len(corpus.vocab), dtype=bool)
    for i in train_idx:
        seen[corpus.sequences[i]] = True
    survivors = [t for t, s in zip(corpus.vocab.tokens, seen) if s]
    needs_rare = any(
        not seen[x] for i in test_idx for x in np.unique(corpus.sequences[i])
    )
    rare = corpus.vocab.rare_token if corpus.vocab.rare_token is not None else rare_label
    if needs_rare and rare not in survivors:
        survivors.append(rare)
    keep_marker = needs_rare or (
        corpus.vocab.rare_token is not None and corpus.vocab.rare_token in survivors
    )
    vocab = Vocabulary.from_tokens(survivors, rare if keep_marker else None)
    new_id = np.full(len(corpus.vocab), -1, dtype=np.int64)
    for old, tok in enumerate(corpus.vocab.tokens):
        if seen[old]:
            new_id[old] = vocab.index[tok]
        elif needs_rare:
            new_id[old] = vocab.index[rare]
    train = Corpus.from_sequences(vocab, [new_id[corpus.sequences[i]] for i in train_idx])
    test = Corpus.from_sequences(vocab, [new_id[corpus.sequences[i]] for i in test_idx])
    return train, test


def split(
    corpus: Corpus, fraction: float, seed: int, rare_label: str = "<RARE>"
) -> tuple[Corpus, Corpus]:
    """Whole-sequence train/test split, deterministic in the seed.

    The train side gets floor(fraction * n) sequences, clamped so both
    sides stay nonempty.  Vocabulary is rebuilt from the train side and
    shared by both corpora; test-only tokens become the rare token.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError("fraction must lie strictly between 0 and 1")
    n = len(corpus.sequences)
    if n < 2:
        raise DataError("splitting requires at least two sequences")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(fraction * n), 1), n - 1)
    train_idx = sorted(int(i) for i in order[:n_train])
    test_idx = sorted(int(i) for i in order[n_train:])
    return _project(corpus, train_idx, test_idx, rare_label)


def kfold_split(
    corpus: Corpus, n_folds: int = 10, seed: int = 0, rare_label: str = "<RARE>"
) -> list[tuple[Corpus, Corpus]]:
    """Deterministic k-fold partition: every sequence lands in exactly one
    test fold; each pair shares the train side's vocabulary."""
    n = len(corpus.sequences)
    if n_folds < 2:
        raise DataError("k-fold splitting needs at least two folds")
    if n_folds > n:
        raise DataError(f"cannot make {n_folds} folds from {n} sequences")
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.linspace(0, n, n_folds + 1).astype(int)
    pairs = []
    for f in range(n_folds):
        test_idx = sorted(int(i) for i in order[bounds[f] : bounds[f + 1]])
        train_idx = sorted(set(range(n)) - set(test_idx))
        pairs.append(_project(corpus, train_idx, test_idx, rare_label))
    return pairs
