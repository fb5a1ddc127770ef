"""Maximum-likelihood training for LAMP models.

The log-likelihood is concave in the lag weights w with P fixed, and concave
in each row of P with everything else fixed, but not jointly concave.
Training therefore alternates block optimizations: each block (the w simplex,
or one P row restricted to its support) is solved by a diagonal-Newton
water-filling step inside a trust region, accepting a step only when the true
objective does not decrease.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from lamp.core import (
    Corpus,
    DataError,
    EmptyRowError,
    HistoryDistribution,
    LampModel,
    NumericError,
    SparseStochasticMatrix,
    _check_vocab,
)

__all__ = [
    "TrainConfig",
    "HalfIterationRecord",
    "TrainReport",
    "BlockResult",
    "EmpiricalMatrixReport",
    "empirical_transition_matrix",
    "grad_w",
    "grad_P",
    "optimize_simplex_block",
    "optimize_row",
    "alternate_minimize",
]

_CURVATURE_FLOOR = 1e-8
_ACCEPT_SLACK = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``rounds`` counts alternation rounds in halves: the first half-round
    optimizes w, the second optimizes every P row once, and so on, so 1.5
    rounds runs the blocks w, P, w.  ``prior_count`` adds an optional
    Dirichlet-style log-prior (``prior_count * sum(log theta)``) to every
    block objective; the default 0 leaves plain maximum likelihood.
    """

    k: int
    rounds: float = 1.5
    kkt_tol: float = 1e-6
    trust_init: float = 0.1
    trust_expand: float = 2.0
    trust_shrink: float = 0.5
    max_newton_iters: int = 100
    init_decay: float = 0.8
    support_epsilon: float = 1e-3
    weight_only: bool = False
    prior_count: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise DataError("k must be at least 1")
        halves = self.rounds * 2.0
        if abs(halves - round(halves)) > 1e-9 or round(halves) < 1:
            raise DataError("rounds must be a positive multiple of 0.5")
        if self.kkt_tol <= 0 or self.trust_init <= 0 or self.support_epsilon <= 0:
            raise DataError("tolerances and the trust radius must be positive")
        if not (0.0 < self.trust_shrink < 1.0 < self.trust_expand):
            raise DataError("need 0 < trust_shrink < 1 < trust_expand")
        if self.max_newton_iters < 1:
            raise DataError("max_newton_iters must be at least 1")
        if not 0.0 < self.init_decay:
            raise DataError("init_decay must be positive")
        if self.prior_count < 0.0:
            raise DataError("prior_count must be nonnegative")

    @property
    def half_iterations(self) -> int:
        return int(round(self.rounds * 2.0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


@dataclass(frozen=True)
class HalfIterationRecord:
    """One ledger row of training progress.

    ``block`` is "init" for the starting point, then "w" or "P".  Wall time
    lives only on this in-memory record; the JSON-lines form omits it so that
    reruns with identical inputs serialize byte-identically.
    """

    block: str
    log_likelihood: float
    perplexity: float
    kkt_residual: float | None
    active_set_size: int
    wall_time_s: float

    def to_json_dict(self) -> dict:
        return {
            "block": self.block,
            "log_likelihood": self.log_likelihood,
            "perplexity": self.perplexity,
            "kkt_residual": self.kkt_residual,
            "active_set_size": self.active_set_size,
        }


@dataclass(frozen=True)
class TrainReport:
    records: tuple[HalfIterationRecord, ...]
    final_model: "LampModel | None" = None

    def to_jsonl(self) -> str:
        import json

        return "".join(
            json.dumps(r.to_json_dict(), sort_keys=True, separators=(",", ":")) + "\n"
            for r in self.records
        )

    @property
    def final_log_likelihood(self) -> float:
        return self.records[-1].log_likelihood

    @property
    def initial_log_likelihood(self) -> float:
        return self.records[0].log_likelihood


@dataclass(frozen=True)
class EmpiricalMatrixReport:
    empty_rows: tuple[int, ...]
    support_size: int
    lag1_pairs: int
    clamped_only_pairs: int


@dataclass(frozen=True)
class BlockResult:
    point: np.ndarray
    value: float
    kkt_residual: float
    iterations: int
    accepted_steps: int


# ---------------------------------------------------------------------------
# Corpus statistics shared by gradients and block optimizers


def _chunks(items: Sequence, n_chunks: int) -> list[Sequence]:
    n_chunks = max(1, min(n_chunks, len(items)))
    bounds = np.linspace(0, len(items), n_chunks + 1).astype(int)
    return [items[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


class _CorpusStats:
    """Flattened scored positions of a corpus for a given lag count.

    For every sequence and every position j >= 1 this records the target
    state and the clamped source state at each lag.  Per-sequence pieces may
    be built on worker threads, but they are always concatenated in sequence
    order, so the result is identical for any thread count.
    """

    def __init__(self, corpus: Corpus, k: int, threads: int = 1) -> None:
        self.k = k
        self.n = len(corpus.vocab)

        def build(seqs: Sequence[np.ndarray]) -> list[tuple[np.ndarray, np.ndarray]]:
            out = []
            for seq in seqs:
                t = seq.size - 1
                if t <= 0:
                    out.append((np.empty((0, k), np.int64), np.empty(0, np.int64)))
                    continue
                pos = np.arange(1, seq.size)
                src = np.empty((t, k), np.int64)
                for i in range(1, k + 1):
                    src[:, i - 1] = seq[np.maximum(pos - i, 0)]
                out.append((src, seq[pos]))
            return out

        chunks = _chunks(corpus.sequences, threads)
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                pieces = [p for part in pool.map(build, chunks) for p in part]
        else:
            pieces = build(corpus.sequences)
        self.src = np.concatenate([s for s, _ in pieces]) if pieces else np.empty((0, k), np.int64)
        self.tgt = np.concatenate([t for _, t in pieces]) if pieces else np.empty(0, np.int64)
        lengths = [t.size for _, t in pieces]
        self.seq_id = np.repeat(np.arange(len(pieces)), lengths)
        self.pos = np.concatenate([np.arange(1, ln + 1) for ln in lengths]) if pieces else np.empty(0, np.int64)
        self.T = int(self.tgt.size)

    @cached_property
    def row_positions(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per state x: (position indices, lag indices) of every (t, i) with
        clamped source x.  Computed once per corpus."""
        flat = self.src.ravel()  # position-major, lag minor
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n)
        out: list[tuple[np.ndarray, np.ndarray]] = []
        start = 0
        for x in range(self.n):
            idx = order[start:start + counts[x]]
            start += counts[x]
            out.append((idx // self.k, idx % self.k))
        return out


def _denominators(stats: _CorpusStats, A: np.ndarray, w: np.ndarray) -> np.ndarray:
    denom = A @ w
    bad = np.nonzero(denom <= 0.0)[0]
    if bad.size:
        t = int(bad[0])
        raise NumericError(
            "zero-probability scored transition at sequence "
            f"{int(stats.seq_id[t])} position {int(stats.pos[t])}"
        )
    return denom


# ---------------------------------------------------------------------------
# Empirical transition matrix


def empirical_transition_matrix(
    corpus: Corpus,
    k: int,
    support_epsilon: float = 1e-3,
    return_report: bool = False,
):
    """Initial transition matrix harvested from the corpus.

    The support of row x holds every state y such that (x, y) occurs as a
    clamped source/target pair at some lag up to k.  Pairs seen at lag 1 get
    the first-order maximum-likelihood count ratio; pairs seen only at deeper
    lags get ``support_epsilon``.  Rows are renormalized to sum to 1.  States
    that never occur as a source keep an empty row, listed in the report.
    """
    if k < 1:
        raise DataError("k must be at least 1")
    if support_epsilon <= 0.0:
        raise DataError("support_epsilon must be positive")
    n = len(corpus.vocab)
    lag1_counts: list[dict[int, int]] = [dict() for _ in range(n)]
    lag1_totals = np.zeros(n, dtype=np.int64)
    support: list[set[int]] = [set() for _ in range(n)]
    for seq in corpus.sequences:
        for j in range(1, seq.size):
            tgt = int(seq[j])
            src1 = int(seq[j - 1])
            lag1_counts[src1][tgt] = lag1_counts[src1].get(tgt, 0) + 1
            lag1_totals[src1] += 1
            for i in range(1, k + 1):
                src = int(seq[j - i]) if j - i >= 0 else int(seq[0])
                support[src].add(tgt)
    rows = []
    lag1_pairs = 0
    clamped_only = 0
    for x in range(n):
        entries = []
        for y in sorted(support[x]):
            c = lag1_counts[x].get(y, 0)
            if c > 0:
                entries.append((y, c / lag1_totals[x]))
                lag1_pairs += 1
            else:
                entries.append((y, support_epsilon))
                clamped_only += 1
        total = sum(v for _, v in entries)
        rows.append([(y, v / total) for y, v in entries])
    matrix = SparseStochasticMatrix.from_rows(n, rows)
    if not return_report:
        return matrix
    report = EmpiricalMatrixReport(
        empty_rows=tuple(matrix.empty_rows()),
        support_size=matrix.support_size,
        lag1_pairs=lag1_pairs,
        clamped_only_pairs=clamped_only,
    )
    return matrix, report


# ---------------------------------------------------------------------------
# Gradients


def grad_w(model: LampModel, corpus: Corpus) -> np.ndarray:
    """Gradient of the corpus log-likelihood in the lag weights.

    Entry i is the sum over scored positions of P(source at lag i, target)
    divided by the position's mixture probability.  Every scored position
    must have positive mixture probability.
    """
    _check_vocab(model.vocab, corpus.vocab)
    stats = _CorpusStats(corpus, model.k)
    if stats.T == 0:
        return np.zeros(model.k)
    A = model.P.lookup_pairs(stats.src, stats.tgt[:, None])
    denom = _denominators(stats, A, model.w.weights)
    return A.T @ (1.0 / denom)


def grad_P(model: LampModel, corpus: Corpus) -> list[np.ndarray]:
    """Gradient of the corpus log-likelihood in the stored entries of P.

    Returns one array per row, aligned with that row's support columns.
    Only stored entries carry gradient storage; corpus pairs outside the
    support are ignored.
    """
    _check_vocab(model.vocab, corpus.vocab)
    stats = _CorpusStats(corpus, model.k)
    flat = np.zeros(model.P.support_size)
    if stats.T:
        A = model.P.lookup_pairs(stats.src, stats.tgt[:, None])
        denom = _denominators(stats, A, model.w.weights)
        w = model.w.weights
        inv = 1.0 / denom
        for i in range(model.k):
            idx = model.P.pair_indices(stats.src[:, i], stats.tgt)
            hit = idx >= 0
            np.add.at(flat, idx[hit], w[i] * inv[hit])
    out = []
    start = 0
    for x in range(model.n):
        size = model.P.row_cols[x].size
        out.append(flat[start:start + size])
        start += size
    return out


# ---------------------------------------------------------------------------
# Water-filling simplex block optimizer


def _kkt_residual(point: np.ndarray, grad: np.ndarray) -> float:
    """Stationarity residual on the simplex.

    The multiplier is the mean gradient over the active set (coordinates
    with positive mass); the residual adds the worst active deviation from
    it and the worst inactive violation above it.
    """
    active = point > 0.0
    lam = float(grad[active].mean())
    res = float(np.max(np.abs(grad[active] - lam)))
    if np.any(~active):
        res += max(0.0, float(np.max(grad[~active] - lam)))
    return res


def _water_fill(point: np.ndarray, grad: np.ndarray, hdiag: np.ndarray, radius: float) -> np.ndarray:
    """Optimal simplex-preserving adjustment of the linearized model.

    Under the diagonal model grad_i(p + u) = g_i + h_i u_i with h_i < 0, the
    best feasible adjustment equalizes model gradients at a water level lam:
    u_i(lam) = clip((lam - g_i) / h_i, -min(p_i, radius), radius).  The total
    adjustment S(lam) = sum_i u_i(lam) is continuous, piecewise linear, and
    nondecreasing as lam falls, so sweeping lam downward across the kink
    points finds the exact level with S(lam) = 0.  Ties between kink points
    break by coordinate index through the stable sort.
    """
    h = np.minimum(hdiag, -_CURVATURE_FLOOR)
    slope = -1.0 / h  # du/d(-lam) while unclamped
    lo = np.minimum(point, radius)  # largest allowed decrease
    lam_enter = grad + lo / slope   # below this the coordinate leaves its lower clamp
    lam_sat = grad - radius / slope  # below this the coordinate pins at +radius

    k = point.size
    order = np.argsort(-np.concatenate([lam_enter, lam_sat]), kind="stable")
    C = -float(lo.sum())  # contribution of clamped coordinates
    A = 0.0               # sum of slopes over unclamped coordinates
    G = 0.0               # sum of grad * slope over unclamped coordinates
    prev = math.inf
    lam_star = None
    for ev in order:
        lam_e = float(lam_enter[ev] if ev < k else lam_sat[ev - k])
        if A > 0.0:
            cand = (C + G) / A
            if lam_e <= cand <= prev:
                lam_star = cand
                break
        elif C == 0.0:
            lam_star = lam_e
            break
        i = ev if ev < k else ev - k
        if ev < k:
            C += float(lo[i])
            A += float(slope[i])
            G += float(grad[i]) * float(slope[i])
        else:
            A -= float(slope[i])
            G -= float(grad[i]) * float(slope[i])
            C += radius
        prev = lam_e
    if lam_star is None:
        # All kinks processed; by continuity the crossing sits in the final
        # segment (or rounding pushed it just outside one). Use the last level.
        lam_star = (C + G) / A if A > 0.0 else prev
    return np.clip((lam_star - grad) / h, -lo, radius)


def optimize_simplex_block(
    objective: Callable[[np.ndarray], float],
    derivatives: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    point: np.ndarray,
    cfg: TrainConfig,
) -> BlockResult:
    """Maximize a concave objective over the probability simplex.

    ``objective`` returns the value (may be -inf on the boundary);
    ``derivatives`` returns (gradient, diagonal curvature) at a feasible
    point.  Newton water-filling steps are taken inside an L-infinity trust
    region; a step is accepted only when the true objective does not
    decrease, expanding the radius on acceptance and shrinking it otherwise.
    Stops when the KKT residual drops to ``cfg.kkt_tol`` or after
    ``cfg.max_newton_iters`` iterations.
    """
    p = np.asarray(point, dtype=np.float64).copy()
    if p.ndim != 1 or p.size == 0:
        raise DataError("block point must be a nonempty vector")
    if np.any(p < 0.0) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise DataError("block point must lie on the probability simplex")
    if p.size == 1:
        p = np.array([1.0])
        return BlockResult(p, float(objective(p)), 0.0, 0, 0)
    value = float(objective(p))
    if not np.isfinite(value):
        raise NumericError("block objective is not finite at the starting point")
    radius = cfg.trust_init
    accepted = 0
    iterations = 0
    for _ in range(cfg.max_newton_iters):
        g, h = derivatives(p)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
            raise NumericError("block derivatives are not finite")
        if _kkt_residual(p, g) <= cfg.kkt_tol:
            break
        iterations += 1
        u = _water_fill(p, g, h, radius)
        if float(np.max(np.abs(u))) < 1e-16:
            break
        cand = p + u
        cand[cand < 0.0] = 0.0
        cand[int(np.argmax(cand))] -= float(cand.sum()) - 1.0
        cand_value = float(objective(cand))
        if cand_value >= value - _ACCEPT_SLACK:
            p, value = cand, cand_value
            accepted += 1
            radius = min(radius * cfg.trust_expand, 1.0)
        else:
            radius *= cfg.trust_shrink
            if radius < 1e-14:
                break
    g, _ = derivatives(p)
    return BlockResult(p, value, _kkt_residual(p, g), iterations, accepted)


# ---------------------------------------------------------------------------
# Block objectives


class _WeightObjective:
    """Log-likelihood as a function of w with P fixed, via the (T, k) matrix
    of per-position per-lag transition probabilities."""

    def __init__(self, A: np.ndarray, prior: float) -> None:
        self.A = A
        self.prior = prior

    def value(self, w: np.ndarray) -> float:
        d = self.A @ w
        if np.any(d <= 0.0):
            return -math.inf
        v = float(np.log(d).sum())
        if self.prior:
            if np.any(w <= 0.0):
                return -math.inf
            v += self.prior * float(np.log(w).sum())
        return v

    def derivatives(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = self.A @ w
        r = 1.0 / d
        g = self.A.T @ r
        h = -(self.A * self.A).T @ (r * r)
        if self.prior:
            safe = np.maximum(w, 1e-12)
            g = g + self.prior / safe
            h = h - self.prior / (safe * safe)
        return g, h


class _RowObjective:
    """Log-likelihood as a function of one P row restricted to its support.

    Each touching position j contributes log(base_j + m_j * q[target]),
    where m_j is the total lag weight pointing at this row from j and base_j
    collects the contribution of all other rows.
    """

    def __init__(self, base: np.ndarray, m: np.ndarray, colidx: np.ndarray, size: int, prior: float) -> None:
        self.base = base
        self.m = m
        self.colidx = colidx
        self.size = size
        self.prior = prior

    def value(self, q: np.ndarray) -> float:
        d = self.base + self.m * q[self.colidx]
        if np.any(d <= 0.0):
            return -math.inf
        v = float(np.log(d).sum())
        if self.prior:
            if np.any(q <= 0.0):
                return -math.inf
            v += self.prior * float(np.log(q).sum())
        return v

    def derivatives(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = self.base + self.m * q[self.colidx]
        r = self.m / d
        g = np.bincount(self.colidx, weights=r, minlength=self.size)
        h = -np.bincount(self.colidx, weights=r * r, minlength=self.size)
        if self.prior:
            safe = np.maximum(q, 1e-12)
            g = g + self.prior / safe
            h = h - self.prior / (safe * safe)
        return g, h


def _row_block_inputs(
    stats: _CorpusStats,
    x: int,
    cols: np.ndarray,
    q: np.ndarray,
    w: np.ndarray,
    denom: np.ndarray,
):
    """(positions, m, colidx, base) for the row-x block, or None if the row
    is untouched by the corpus under the current weights."""
    pos_pairs, lag_pairs = stats.row_positions[x]
    if pos_pairs.size == 0 or cols.size == 0:
        return None
    wvals = w[lag_pairs]
    upos, inverse = np.unique(pos_pairs, return_inverse=True)
    m = np.bincount(inverse, weights=wvals)
    keep = m > 0.0
    upos, m = upos[keep], m[keep]
    if upos.size == 0:
        return None
    tgt = stats.tgt[upos]
    cidx = np.searchsorted(cols, tgt)
    on = (cidx < cols.size) & (cols[np.minimum(cidx, cols.size - 1)] == tgt)
    upos, m, cidx = upos[on], m[on], cidx[on]
    if upos.size == 0:
        return None
    base = denom[upos] - m * q[cidx]
    return upos, m, cidx, base


def optimize_row(model: LampModel, corpus: Corpus, state: int, cfg: TrainConfig) -> np.ndarray:
    """Optimize one row of P over its support, everything else fixed.

    Returns the new row probabilities aligned with the row's support columns.
    Rows never touched by the corpus come back unchanged.
    """
    _check_vocab(model.vocab, corpus.vocab)
    if not 0 <= state < model.n:
        raise DataError(f"state id {state} out of range")
    if cfg.k != model.k:
        raise DataError(f"cfg.k={cfg.k} does not match the model's k={model.k}")
    cols, probs = model.P.row(state)
    if cols.size == 0:
        raise EmptyRowError(f"state {state} has no outgoing transitions to optimize")
    q = probs.copy()
    if cols.size == 1:
        return np.ones(1)
    stats = _CorpusStats(corpus, model.k)
    if stats.T == 0:
        return q
    A = model.P.lookup_pairs(stats.src, stats.tgt[:, None])
    denom = _denominators(stats, A, model.w.weights)
    inputs = _row_block_inputs(stats, state, cols, q, model.w.weights, denom)
    if inputs is None:
        return q
    _, m, cidx, base = inputs
    obj = _RowObjective(base, m, cidx, cols.size, cfg.prior_count)
    return optimize_simplex_block(obj.value, obj.derivatives, q, cfg).point


# ---------------------------------------------------------------------------
# Alternating minimization


def alternate_minimize(
    corpus: Corpus, cfg: TrainConfig, threads: int = 1
) -> tuple[LampModel, TrainReport]:
    """Fit a LAMP to a corpus by alternating w and P block optimizations.

    P starts from the empirical transition matrix and w from weights
    proportional to ``init_decay ** lag``.  Half-rounds alternate starting
    with w; with ``weight_only`` the P halves are skipped and the returned
    matrix is exactly the empirical one.  The training log-likelihood never
    decreases across recorded steps.
    """
    if corpus.total_transitions < 1:
        raise DataError("training requires at least one scored transition")
    P0 = empirical_transition_matrix(corpus, cfg.k, cfg.support_epsilon)
    w = HistoryDistribution.geometric(cfg.init_decay, cfg.k).weights.copy()
    stats = _CorpusStats(corpus, cfg.k, threads=threads)
    n = len(corpus.vocab)
    row_cols = [P0.row_cols[x] for x in range(n)]
    row_q = [P0.row_probs[x].copy() for x in range(n)]

    def current_matrix() -> SparseStochasticMatrix:
        return SparseStochasticMatrix.from_rows(
            n, [list(zip(cols.tolist(), q.tolist())) for cols, q in zip(row_cols, row_q)]
        )

    def active_size() -> int:
        return int(np.count_nonzero(w > 0)) + sum(int(np.count_nonzero(q > 0)) for q in row_q)

    matrix = P0
    A = matrix.lookup_pairs(stats.src, stats.tgt[:, None])
    denom = _denominators(stats, A, w)
    T = stats.T

    def record(block: str, residual: float | None, seconds: float) -> HalfIterationRecord:
        ll = float(np.log(denom).sum())
        return HalfIterationRecord(
            block=block,
            log_likelihood=ll,
            perplexity=float(np.exp(-ll / T)),
            kkt_residual=residual,
            active_set_size=active_size(),
            wall_time_s=seconds,
        )

    records = [record("init", None, 0.0)]
    for half in range(cfg.half_iterations):
        t0 = time.perf_counter()
        if half % 2 == 0:
            obj = _WeightObjective(A, cfg.prior_count)
            res = optimize_simplex_block(obj.value, obj.derivatives, w, cfg)
            w = res.point
            denom = _denominators(stats, A, w)
            records.append(record("w", res.kkt_residual, time.perf_counter() - t0))
        else:
            if cfg.weight_only:
                continue
            worst = 0.0
            for x in range(n):
                if row_cols[x].size <= 1:
                    continue
                inputs = _row_block_inputs(stats, x, row_cols[x], row_q[x], w, denom)
                if inputs is None:
                    continue
                upos, m, cidx, base = inputs
                obj = _RowObjective(base, m, cidx, int(row_cols[x].size), cfg.prior_count)
                res = optimize_simplex_block(obj.value, obj.derivatives, row_q[x], cfg)
                row_q[x] = res.point
                denom[upos] = base + m * res.point[cidx]
                worst = max(worst, res.kkt_residual)
            matrix = current_matrix()
            A = matrix.lookup_pairs(stats.src, stats.tgt[:, None])
            denom = _denominators(stats, A, w)
            records.append(record("P", worst, time.perf_counter() - t0))

    if records[-1].log_likelihood < records[0].log_likelihood - 1e-9:
        raise NumericError("training decreased the log-likelihood; numeric failure")
    model = LampModel(
        w=HistoryDistribution(w),
        P=matrix if not cfg.weight_only else P0,
        vocab=corpus.vocab,
    )
    return model, TrainReport(tuple(records), final_model=model)
