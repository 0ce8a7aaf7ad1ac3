"""Random-coding union bound with minimum-distance decoding and balancing feedback
on the parallel-BSC broadcast pair.

Error counts evolve as follows. The decoder with strictly more errors so far
(the lagging one) sees the next symbol through BSC(q1), the other through
BSC(q2). On a tie a fair coin decides who gets the q1 link.

The Z1 marginal is computed exactly without a 2-d table. Write D = Z1 - Z2.
D only changes on steps where exactly one decoder errs (a "move"), and the
move direction depends only on the sign of D. Let K be the number of moves
and J the number of double errors. Then Z1 = J + (K + D_K)/2, where D_K is a
reflected walk after K moves and J ~ Bin(n - K, r) given K.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .channel import BroadcastPair
from .errors import NoFeasibleM, OutOfRange, TruncationMassExceeded, WrongChannelFamily
from .stoch import IntPmf, log_binomial_pmf, log_fair_binomial_cdf

TRUNCATION_LIMIT = 1e-12


def _check_q(q1, q2):
    for name, q in (("q1", q1), ("q2", q2)):
        if not (0.0 <= q <= 0.5):
            raise OutOfRange(f"{name} must lie in [0, 1/2], got {q}")


def default_band(n: int, q1: float, q2: float) -> int:
    """Half-width for D; the walk only returns toward zero when q1 < q2."""
    if q1 >= q2:
        return n
    return 8 * math.ceil(math.sqrt(max(q1, q2) * n))


@dataclass(frozen=True)
class CoupledPmf:
    pmf: IntPmf
    truncation_mass: float


def _difference_walk_step(dist, a):
    """One move of D: up with prob a above zero, 1-a below zero, 1/2 at zero.

    Mass that would leave the array is held at the edge; the held amount is
    returned alongside the new distribution.
    """
    size = dist.size
    mid = size // 2
    up = np.empty(size)
    up[mid + 1:] = a
    up[:mid] = 1.0 - a
    up[mid] = 0.5
    new = np.zeros(size)
    new[1:] += dist[:-1] * up[:-1]
    new[:-1] += dist[1:] * (1.0 - up[1:])
    out_hi = dist[-1] * up[-1]
    out_lo = dist[0] * (1.0 - up[0])
    new[-1] += out_hi
    new[0] += out_lo
    return new, out_hi + out_lo


def coupled_marginal(n: int, q1: float, q2: float, truncation_band="default") -> CoupledPmf:
    """Z1 marginal; truncation_band None runs the untruncated difference walk."""
    _check_q(q1, q2)
    if n < 0:
        raise OutOfRange("n must be nonnegative")
    if n == 0:
        return CoupledPmf(IntPmf.point(0.0), 0.0)
    p_move = q1 * (1 - q2) + (1 - q1) * q2
    p_both = q1 * q2
    p_none = 1.0 - p_move - p_both
    a = q1 * (1 - q2) / p_move if p_move > 0 else 0.5
    r = p_both / (p_both + p_none) if p_both + p_none > 0 else 0.0

    if truncation_band == "default":
        truncation_band = default_band(n, q1, q2)
    band = n if truncation_band is None else max(0, min(n, int(truncation_band)))
    log_wk = log_binomial_pmf(n, p_move)
    ks = np.flatnonzero(log_wk > -745.0)
    k_max = int(ks.max())

    out = np.zeros(n + 1)
    dist = np.zeros(2 * band + 1)
    dist[band] = 1.0
    folded = 0.0
    held_total = 0.0  # cumulative mass clamped at the band edges
    for k in range(k_max + 1):
        if k > 0:
            dist, held = _difference_walk_step(dist, a)
            held_total += held
        wk = math.exp(log_wk[k])
        folded += wk * held_total
        if wk == 0.0:
            continue
        # H_k = (k + D_k)/2 on h = 0..k; D = 2h - k
        d_vals = np.arange(-band, band + 1)
        keep = (dist > 0) & (np.abs(d_vals) <= k)
        if not np.any(keep):
            continue
        h = (k + d_vals[keep]) // 2
        h_lo = int(h.min())
        h_pmf = np.zeros(int(h.max()) - h_lo + 1)
        np.add.at(h_pmf, h - h_lo, dist[keep])
        j_pmf = np.exp(log_binomial_pmf(n - k, r))
        conv = signal.fftconvolve(h_pmf, j_pmf) if h_pmf.size > 64 else np.convolve(h_pmf, j_pmf)
        conv = np.clip(conv, 0.0, None)
        hi = min(n + 1, h_lo + conv.size)
        out[h_lo:hi] += wk * conv[:hi - h_lo]
    out /= out.sum()
    if folded > TRUNCATION_LIMIT:
        raise TruncationMassExceeded(f"band {band} folds mass {folded:.3e}; widen the band")
    return CoupledPmf(IntPmf.from_probs(out), folded)


def coupled_pmf(n: int, q1: float, q2: float, truncation_band="default") -> IntPmf:
    """Exact pmf of decoder 1's error count after n uses."""
    return coupled_marginal(n, q1, q2, truncation_band).pmf


def coupled_joint_pmf(n: int, q1: float, q2: float) -> np.ndarray:
    """Literal dynamic program over (z1, z2); O(n^3), meant for n <= 400."""
    _check_q(q1, q2)
    joint = np.zeros((n + 1, n + 1))
    joint[0, 0] = 1.0
    z1, z2 = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    lag1 = (z1 > z2).astype(float)
    tie = (z1 == z2).astype(float)
    # probability that decoder 1 / decoder 2 sees the q1 link, per state
    g1 = lag1 + 0.5 * tie
    for _ in range(n):
        new = np.zeros_like(joint)
        for e1p, e2p, sel in ((q1, q2, g1), (q2, q1, 1.0 - g1)):
            mass = joint * sel
            new += mass * (1 - e1p) * (1 - e2p)
            new[1:, :] += mass[:-1, :] * e1p * (1 - e2p)
            new[:, 1:] += mass[:, :-1] * (1 - e1p) * e2p
            new[1:, 1:] += mass[:-1, :-1] * e1p * e2p
        joint = new
    return joint


def _log_m_minus_one(m_codewords) -> float:
    if m_codewords < 1:
        raise OutOfRange("need at least one codeword")
    if m_codewords == 1:
        return -math.inf
    if isinstance(m_codewords, int):
        return math.log(m_codewords - 1)
    return math.log(m_codewords - 1.0)


def _rcu_from_log(pmf_probs: np.ndarray, log_cdf: np.ndarray, log_m1: float) -> float:
    if log_m1 == -math.inf:
        return 0.0
    terms = np.minimum(1.0, np.exp(np.minimum(log_m1 + log_cdf, 0.0)))
    return float(min(1.0, np.dot(pmf_probs, terms)))


def rcu_epsilon(n: int, m_codewords, q1: float, q2: float, pmf: IntPmf | None = None) -> float:
    """sum_t P[Z1 = t] min{1, (M-1) P[Bin(n, 1/2) <= t]}."""
    if pmf is None:
        pmf = coupled_pmf(n, q1, q2)
    return _rcu_from_log(pmf.probs, log_fair_binomial_cdf(n)[: len(pmf)], _log_m_minus_one(m_codewords))


@dataclass(frozen=True)
class RcuPoint:
    n: int
    epsilon: float
    logM: float
    epsilon_achieved: float
    truncation_mass: float
    m_codewords: int | None  # exact count when it fits in a float mantissa


def rcu_point(n: int, epsilon: float, q1: float, q2: float,
              truncation_band="default") -> RcuPoint:
    if not (0.0 < epsilon <= 1.0):
        raise OutOfRange("epsilon must lie in (0, 1]")
    cm = coupled_marginal(n, q1, q2, truncation_band)
    probs = cm.pmf.probs
    log_cdf = log_fair_binomial_cdf(n)[: len(probs)]

    def eps_of(log_m1):
        return _rcu_from_log(probs, log_cdf, log_m1)

    if eps_of(-math.inf) > epsilon:
        raise NoFeasibleM("even a single message exceeds the target")
    hi_cap = n * math.log(2.0) + 60.0
    if eps_of(hi_cap) <= epsilon:
        return RcuPoint(n, epsilon, math.inf, eps_of(hi_cap), cm.truncation_mass, None)
    if eps_of(0.0) > epsilon:  # M = 2 infeasible
        return RcuPoint(n, epsilon, 0.0, 0.0, cm.truncation_mass, 1)
    lo, hi = 0.0, hi_cap
    while hi - lo > 1e-13 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if eps_of(mid) <= epsilon:
            lo = mid
        else:
            hi = mid
    if lo < 50 * math.log(2.0):
        # integer search on M near exp(lo) + 1
        m_lo = max(2, int(math.floor(math.exp(lo))) + 1)
        while m_lo > 2 and eps_of(math.log(m_lo - 1)) > epsilon:
            m_lo -= 1
        while eps_of(math.log(m_lo)) <= epsilon:
            m_lo += 1
        return RcuPoint(n, epsilon, math.log(m_lo), eps_of(math.log(m_lo - 1)),
                        cm.truncation_mass, m_lo)
    log_m = lo + math.log1p(math.exp(-lo))
    return RcuPoint(n, epsilon, log_m, eps_of(lo), cm.truncation_mass, None)


def rcu_max_logM(n: int, epsilon: float, q1: float, q2: float,
                 truncation_band="default") -> float:
    """log of the largest M whose RCU value is at most epsilon."""
    return rcu_point(n, epsilon, q1, q2, truncation_band).logM


def min_distance_rcu_bsc(n: int, m_codewords, p: float) -> float:
    """RCU bound for a BSC(p) with i.i.d. uniform codewords and min-distance decoding."""
    if m_codewords == 1:
        return 0.0
    if n == 0:
        return 1.0
    probs = np.exp(log_binomial_pmf(n, p))
    return _rcu_from_log(probs, log_fair_binomial_cdf(n), _log_m_minus_one(m_codewords))


def epsilon_star_parallel_bsc(n_b: int, m_tilde, q1: float, q2: float) -> float:
    """Upper bound on the no-feedback error for sending m_tilde messages in n_b uses.

    With uniform inputs each decoder's errors are i.i.d. Bern((q1+q2)/2). A
    codebook that is good on average for both decoders exists with
    max error <= twice the single-decoder RCU value.
    """
    _check_q(q1, q2)
    if n_b < 0:
        raise OutOfRange("n_b must be nonnegative")
    if m_tilde <= 1:
        return 0.0
    return min(1.0, 2.0 * min_distance_rcu_bsc(n_b, m_tilde, 0.5 * (q1 + q2)))


def parallel_bsc_parameters(pair: BroadcastPair):
    """Recover (q1, q2) when the pair is the parallel-BSC family."""
    w1 = pair.w1.w
    if w1.shape != (4, 2):
        raise WrongChannelFamily("parallel-BSC pairs have 4 inputs and 2 outputs")
    q1, q2 = float(w1[0, 1]), float(w1[2, 1])
    expected = np.array([[1 - q1, q1], [q1, 1 - q1], [1 - q2, q2], [q2, 1 - q2]])
    if np.any(np.abs(w1 - expected) > 1e-12) or np.any(np.abs(pair.w2.w - expected[[2, 3, 0, 1]]) > 1e-12):
        raise WrongChannelFamily("pair is not a parallel-BSC construction")
    if q1 > 0.5 or q2 > 0.5:
        raise WrongChannelFamily("crossovers above 1/2 are outside the canonical range")
    return q1, q2
