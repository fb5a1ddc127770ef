"""Chain structure checks and the model's equilibrium/mixing machinery.

Covers stationary distributions, ergodicity classification, exact mixing
times by dense powering, simulation of the exponent (renewal) process that
drives the model's equilibrium behavior, Bernstein-type constants, and the
resulting mixing-time bound for the history-mixture process.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from lamp.core import (
    DataError,
    HistoryDistribution,
    LampModel,
    NonErgodicError,
    NumericError,
    SparseStochasticMatrix,
    generate,
)

__all__ = [
    "ErgodicityReport",
    "ExponentTrace",
    "RenewalEstimate",
    "MixingBound",
    "is_ergodic",
    "stationary_distribution",
    "mixing_time",
    "simulate_exponent_process",
    "simulate_exponent_processes",
    "renewal_rate_estimate",
    "bernstein_constant",
    "lamp_mixing_bound",
    "empirical_state_distribution",
    "export_trace_csv",
    "analysis_report",
]

#: Dense matrix powering is used for exact mixing times; refuse larger n.
MIXING_STATE_GUARD = 2000

#: Hard cap on powering steps before declaring non-convergence.
_MIXING_HORIZON = 1_000_000


@dataclass(frozen=True)
class ErgodicityReport:
    """Classification of a stochastic matrix: ergodic, reducible, or periodic."""

    ergodic: bool
    reason: str

    def __post_init__(self) -> None:
        if self.reason not in ("ergodic", "reducible", "periodic"):
            raise DataError(f"unknown ergodicity reason {self.reason!r}")
        if self.ergodic != (self.reason == "ergodic"):
            raise DataError("ergodic flag inconsistent with reason")


def _positive_adjacency(P: SparseStochasticMatrix) -> list[np.ndarray]:
    """Out-neighbour lists over entries with strictly positive probability."""
    return [
        cols[probs > 0.0] for cols, probs in zip(P.row_cols, P.row_probs)
    ]


def _bfs_levels(adj: list[Iterable[int]], n: int, root: int = 0) -> np.ndarray:
    level = np.full(n, -1, dtype=np.int64)
    level[root] = 0
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if level[v] < 0:
                level[v] = level[u] + 1
                queue.append(int(v))
    return level


def is_ergodic(P: SparseStochasticMatrix) -> ErgodicityReport:
    """Classify the support digraph of P.

    Irreducibility is strong connectivity of the positive-probability edge
    set; aperiodicity is a period of 1, computed as the gcd of
    level(u) + 1 - level(v) over all edges (u, v) with BFS levels from
    state 0.
    """
    n = P.n
    adj = _positive_adjacency(P)
    forward = _bfs_levels(adj, n)
    if np.any(forward < 0):
        return ErgodicityReport(False, "reducible")
    radj: list[list[int]] = [[] for _ in range(n)]
    for u in range(n):
        for v in adj[u]:
            radj[int(v)].append(u)
    backward = _bfs_levels(radj, n)
    if np.any(backward < 0):
        return ErgodicityReport(False, "reducible")
    period = 0
    for u in range(n):
        for v in adj[u]:
            period = math.gcd(period, int(forward[u]) + 1 - int(forward[v]))
    if period != 1:
        return ErgodicityReport(False, "periodic")
    return ErgodicityReport(True, "ergodic")


def stationary_distribution(
    P: SparseStochasticMatrix, tol: float = 1e-12, max_iters: int = 500_000
) -> np.ndarray:
    """Stationary probability vector of an ergodic P by power iteration.

    Starts from the uniform vector and stops when the L1 residual of one
    update falls to ``tol``; the returned vector satisfies
    ||pi P - pi||_1 <= tol because left-multiplication by a stochastic
    matrix never expands L1 distances.
    """
    if tol <= 0.0:
        raise DataError("tol must be positive")
    report = is_ergodic(P)
    if not report.ergodic:
        raise NonErgodicError(f"matrix is not ergodic: {report.reason}")
    pi = np.full(P.n, 1.0 / P.n)
    for _ in range(max_iters):
        nxt = P.left_multiply(pi)
        if float(np.abs(nxt - pi).sum()) <= tol:
            return nxt / nxt.sum()
        pi = nxt
    raise NumericError(f"power iteration did not reach {tol} in {max_iters} iterations")


def mixing_time(P: SparseStochasticMatrix, delta: float) -> int:
    """Smallest t with worst-start total variation TV(P^t(z, .), pi) <= delta.

    TV is never expanded by a further P step, so the first crossing time is
    the mixing time; powering continues past it until TV falls to delta/10
    (or a 10 * n * t horizon) to certify that the threshold stays satisfied.
    """
    if delta <= 0.0:
        raise DataError("delta must be positive")
    if P.n > MIXING_STATE_GUARD:
        raise DataError(
            f"dense mixing-time computation is limited to n <= {MIXING_STATE_GUARD}"
        )
    report = is_ergodic(P)
    if not report.ergodic:
        raise NonErgodicError(f"matrix is not ergodic: {report.reason}")
    if delta >= 1.0:
        return 0
    pi = stationary_distribution(P)
    dense = P.dense()
    M = np.eye(P.n)

    def tv(mat: np.ndarray) -> float:
        return 0.5 * float(np.max(np.abs(mat - pi).sum(axis=1)))

    t = 0
    t_first = None
    while True:
        if t_first is None and t > _MIXING_HORIZON:
            raise NumericError("mixing-time horizon exceeded")
        M = M @ dense
        t += 1
        d = tv(M)
        if t_first is None:
            if d <= delta:
                t_first = t
        else:
            if d > delta:
                raise NumericError(
                    "total variation rose back above delta during certification"
                )
            if d <= delta / 10.0 or t >= 10 * P.n * t_first:
                return t_first


# ---------------------------------------------------------------------------
# Exponent (renewal) process


@dataclass(frozen=True)
class ExponentTrace:
    """Realized exponent process e_1..e_{t_max}.

    e_t counts how many matrix applications separate the state at time t
    from the start state, following the recursion e_t = e_{t - W_t} + 1
    with e_s = 0 for s <= 0, so e_1 = 1 always and e_t never exceeds t.
    """

    t_max: int
    exponents: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        e = np.ascontiguousarray(np.asarray(self.exponents, dtype=np.int64))
        e.setflags(write=False)
        object.__setattr__(self, "exponents", e)
        if self.t_max < 1 or e.shape != (self.t_max,):
            raise DataError("trace must hold exponents e_1..e_{t_max}")
        if e[0] != 1:
            raise DataError("e_1 must be 1")
        t = np.arange(1, self.t_max + 1)
        if np.any(e < 0) or np.any(e > t):
            raise DataError("exponents must satisfy 0 <= e_t <= t")

    def exponent_at(self, t: int) -> int:
        if not 1 <= t <= self.t_max:
            raise DataError(f"t={t} outside the simulated horizon")
        return int(self.exponents[t - 1])


def _simulate_exponent_matrix(
    w: HistoryDistribution, t_max: int, seeds: list[int]
) -> np.ndarray:
    """(len(seeds), t_max) exponent values; row r is driven by seeds[r].

    Each trace draws exactly one uniform per time step t = 2..t_max from its
    own generator, so a longer horizon with the same seed extends a shorter
    trace without changing its prefix.
    """
    if t_max < 1:
        raise DataError("t_max must be at least 1")
    m = len(seeds)
    cum = np.asarray(w._cum)
    lags = np.empty((m, max(t_max - 1, 0)), dtype=np.int64)
    for r, seed in enumerate(seeds):
        u = np.random.default_rng(seed).random(t_max - 1)
        lags[r] = np.searchsorted(cum, u, side="right") + 1
    e = np.zeros((m, t_max + 1), dtype=np.int64)
    e[:, 1] = 1
    rows = np.arange(m)
    for t in range(2, t_max + 1):
        back = np.maximum(t - lags[:, t - 2], 0)  # e_s = 0 for s <= 0
        e[:, t] = e[rows, back] + 1
    return e[:, 1:]


def simulate_exponent_process(w: HistoryDistribution, t_max: int, seed: int) -> ExponentTrace:
    """Simulate one exponent trace; deterministic given the seed."""
    values = _simulate_exponent_matrix(w, t_max, [seed])[0]
    return ExponentTrace(t_max=t_max, exponents=values, seed=seed)


def simulate_exponent_processes(
    w: HistoryDistribution, t_max: int, n_traces: int, seed: int
) -> np.ndarray:
    """(n_traces, t_max) array of independent exponent traces.

    Row i is bitwise identical to simulate_exponent_process with seed
    ``seed ^ i``, the package-wide seed-splitting rule for independent
    Monte-Carlo trials.
    """
    if n_traces < 1:
        raise DataError("n_traces must be at least 1")
    return _simulate_exponent_matrix(w, t_max, [seed ^ i for i in range(n_traces)])


@dataclass(frozen=True)
class RenewalEstimate:
    """Empirical renewal rate of a trace against its theory prediction.

    ``clt_statistic`` is (e_t - t/mu) / (sigma mu^{-3/2} sqrt(t)); it is
    None when sigma = 0 (deterministic lag distribution), where the
    normalized fluctuation is undefined.
    """

    rate: float
    predicted: float
    clt_statistic: float | None


def renewal_rate_estimate(trace: ExponentTrace, w: HistoryDistribution) -> RenewalEstimate:
    t = trace.t_max
    e_t = float(trace.exponents[-1])
    mu = w.mean
    sigma2 = max(w.variance, 0.0)
    rate = e_t / t
    predicted = 1.0 / mu
    if sigma2 == 0.0:
        return RenewalEstimate(rate=rate, predicted=predicted, clt_statistic=None)
    sigma = math.sqrt(sigma2)
    stat = (e_t - t / mu) / (sigma * mu ** -1.5 * math.sqrt(t))
    return RenewalEstimate(rate=rate, predicted=predicted, clt_statistic=stat)


def bernstein_constant(w: HistoryDistribution, epsilon: float) -> float:
    """Exponential-decay constant for the renewal lower-deviation bound.

    Applying Bernstein's inequality to the centered lags (bounded by k)
    gives, in time units,

        C(eps) = eps^2 E[w] / ((1 + eps) (2 Var[w] + (2/3) k eps E[w])).
    """
    if epsilon <= 0.0:
        raise DataError("epsilon must be positive")
    mu = w.mean
    var = max(w.variance, 0.0)
    k = w.k
    return epsilon**2 * mu / ((1.0 + epsilon) * (2.0 * var + (2.0 / 3.0) * k * epsilon * mu))


@dataclass(frozen=True)
class MixingBound:
    """High-probability mixing-time bound for the history-mixture process.

    ``bound`` dominates the process's delta-mixing time with probability at
    least ``confidence`` = 1 - e^{-C T} / (1 - e^{-C}).  The confidence is
    reported raw: for small T it can be zero or negative, meaning the bound
    is vacuous at that threshold, and callers must check rather than rely
    on clamping.  ``chain_mixing_time`` is the underlying matrix's own
    mixing time, which is also the exact value when all lag mass sits on
    lag 1.
    """

    T: int
    epsilon: float
    delta: float
    bound: int
    confidence: float
    C: float
    chain_mixing_time: int


def lamp_mixing_bound(
    w: HistoryDistribution,
    P: SparseStochasticMatrix,
    delta: float,
    epsilon: float,
    T: int,
) -> MixingBound:
    """bound = max(T, ceil((1 + eps) E[w] t_mix(P, delta))) with its confidence."""
    if T < 0:
        raise DataError("T must be nonnegative")
    t_mix = mixing_time(P, delta)
    C = bernstein_constant(w, epsilon)
    bound = max(int(T), int(math.ceil((1.0 + epsilon) * w.mean * t_mix)))
    confidence = 1.0 - math.exp(-C * T) / (1.0 - math.exp(-C))
    return MixingBound(
        T=int(T),
        epsilon=float(epsilon),
        delta=float(delta),
        bound=bound,
        confidence=confidence,
        C=C,
        chain_mixing_time=t_mix,
    )


# ---------------------------------------------------------------------------
# Empirical occupancy


def empirical_state_distribution(
    model: LampModel,
    steps: int,
    burn_in: int,
    seed: int,
    many_runs: bool = False,
) -> np.ndarray:
    """Occupancy frequencies of the generated process after a burn-in.

    Default view: one long trajectory from state 0, counting the ``steps``
    states after position ``burn_in``.  With ``many_runs`` the ensemble
    view is used instead: ``steps`` independent runs (seeded seed ^ i) each
    contribute their state at time burn_in + 1.  Both converge to the same
    limit for ergodic instances.
    """
    if steps < 1:
        raise DataError("steps must be at least 1")
    if burn_in < 0:
        raise DataError("burn_in must be nonnegative")
    report = is_ergodic(model.P)
    if not report.ergodic:
        raise NonErgodicError(f"matrix is not ergodic: {report.reason}")
    counts = np.zeros(model.n)
    if many_runs:
        for i in range(steps):
            seq = generate(model, start=0, length=burn_in + 2, seed=seed ^ i)
            counts[int(seq[-1])] += 1.0
    else:
        seq = generate(model, start=0, length=burn_in + steps + 1, seed=seed)
        states, c = np.unique(seq[burn_in + 1:], return_counts=True)
        counts[states] = c
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# Reporting


def export_trace_csv(trace: ExponentTrace, path: str) -> None:
    """Write a trace as CSV with columns t, e_t."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,e_t\n")
        for t in range(1, trace.t_max + 1):
            fh.write(f"{t},{int(trace.exponents[t - 1])}\n")


def analysis_report(
    operation: str,
    inputs: dict,
    outputs: dict,
    tolerances: dict,
    passed: bool | None,
) -> dict:
    """JSON-ready analysis record: {operation, inputs, outputs, tolerances, pass}."""
    return {
        "operation": operation,
        "inputs": inputs,
        "outputs": outputs,
        "tolerances": tolerances,
        "pass": passed,
    }
