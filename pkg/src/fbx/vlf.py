"""Variable-length feedback: the Fano-type converse and a two-phase achievability
scheme evaluated by simulation.

Phase one sends L blocks of m i.i.d. symbols drawn from one of two tilted
input laws, picked to favor the decoder with the smaller accumulated density.
Phase two sends i.i.d. P* symbols. Decoder k stops the first time its
accumulated density reaches gamma at or after L*m, or at tau_max.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import BroadcastPair, ChannelAnalysis, density_table
from .errors import BlocklengthTooSmall, InfeasibleEpsilon, OutOfRange, WrongChannelFamily
from .flf_sim import _eps_star_fn, balancing_direction, icbrt
from .stoch import (RngStream, binary_entropy_nats, chunk_sizes, cp_interval, cp_upper,
                    empirical_bernstein)

VLF_STREAM = 0x564C46
CONFIDENCE = 0.99


def vlf_converse_logM(ell: float, epsilon: float, capacity_c: float) -> float:
    """(ell C + h(eps)) / (1 - eps)."""
    if not (0.0 < epsilon < 1.0):
        raise OutOfRange("epsilon must lie in (0, 1)")
    if ell < 0:
        raise OutOfRange("average length must be nonnegative")
    return (ell * capacity_c + binary_entropy_nats(epsilon)) / (1.0 - epsilon)


def _log_floor_exp(x: float) -> float:
    """log floor(e^x) for x >= 0."""
    if x < 36.0:
        return math.log(math.floor(math.exp(x)))
    return x  # floor changes the value by less than one ulp here


@dataclass(frozen=True)
class VlfParams:
    ell_bar: int
    L: int
    m: int
    kappa: int
    n_b: int
    tau_max: int
    gamma: float
    q: float
    log_m_codewords: float
    types: np.ndarray  # 2 x |X| tilted input laws used in phase one
    p_star: np.ndarray
    rho: float
    n_b_rule: str = "kappa"

    def __post_init__(self):
        if self.tau_max <= self.L * self.m:
            raise OutOfRange("tau_max must exceed L*m")
        if not (0.0 <= self.q <= 1.0):
            raise OutOfRange("q must lie in [0, 1]")

    @property
    def first_phase(self) -> int:
        return self.L * self.m

    def to_dict(self) -> dict:
        return {"ell_bar": self.ell_bar, "L": self.L, "m": self.m, "kappa": self.kappa,
                "n_b": self.n_b, "tau_max": self.tau_max, "gamma": self.gamma, "q": self.q,
                "log_m_codewords": self.log_m_codewords, "types": self.types.tolist(),
                "p_star": self.p_star.tolist(), "rho": self.rho, "n_b_rule": self.n_b_rule}


def _auto_rho(pair, p_star, scale, floor_frac=0.5):
    """Largest rho <= 1 keeping P* -/+ v0*scale >= floor_frac * P* on supp(P*)."""
    v_unit = balancing_direction(pair, p_star, 1.0)
    room = np.inf
    for x in np.flatnonzero(p_star > 0):
        if v_unit[x] != 0:
            room = min(room, (1.0 - floor_frac) * p_star[x] / (abs(v_unit[x]) * scale))
    return float(min(1.0, room))


def default_vlf_params(ell_bar: int, epsilon: float, analysis: ChannelAnalysis,
                       pair: BroadcastPair, rho: float | None = None) -> VlfParams:
    """Parameters for design length ell_bar; q is left at 0 for later calibration."""
    if not (0.0 < epsilon < 1.0):
        raise OutOfRange("epsilon must lie in (0, 1)")
    c = analysis.capacity_c
    if ell_bar < 3:
        raise BlocklengthTooSmall("ell_bar too small")
    root = math.sqrt(ell_bar) * math.log(ell_bar)
    ell_minus = ell_bar - root
    if ell_minus < 8:
        raise BlocklengthTooSmall(f"ell_bar = {ell_bar} leaves no room for the first phase")
    L = icbrt(math.floor(ell_minus))
    m = math.floor(ell_minus / L)
    tau_max = math.floor(ell_bar + root)
    kappa = math.floor(math.log(2.0) / c) + 1
    gamma = c * ell_bar - 2.0 * ell_bar ** (1.0 / 3.0) * math.log(ell_bar)
    if gamma - math.log(ell_bar) < 0:
        raise BlocklengthTooSmall(f"ell_bar = {ell_bar} gives fewer than one codeword")
    p_star = analysis.p_star
    scale = ell_bar ** (-1.0 / 3.0)
    if rho is None:
        rho = _auto_rho(pair, p_star, scale)
    v0 = balancing_direction(pair, p_star, rho)
    types = np.array([p_star + v0 * scale, p_star - v0 * scale])
    if np.any(types < 0):
        raise BlocklengthTooSmall("tilted input laws leave the simplex; lower rho")
    types = types / types.sum(axis=1, keepdims=True)
    return VlfParams(ell_bar=ell_bar, L=L, m=m, kappa=kappa, n_b=kappa * L, tau_max=tau_max,
                     gamma=gamma, q=0.0, log_m_codewords=_log_floor_exp(gamma - math.log(ell_bar)),
                     types=types, p_star=p_star.copy(), rho=rho)


@dataclass(frozen=True)
class StoppingStats:
    trials: int
    e_max_tau: tuple  # (mean, lower, upper)
    e_min_tau: tuple
    p_tau_max: tuple  # per decoder (k, lower, upper)
    p_tau_max_any: tuple  # CI for max_k P[tau_k = tau_max] (upper from the larger count)
    sync_gap_q99: float  # 99th percentile of |S1 - S2| at the end of phase one
    p_competitor: tuple | None = None  # per decoder CP upper of P[tau_k >= bar tau_k]

    def to_dict(self) -> dict:
        return {"trials": self.trials, "e_max_tau": list(self.e_max_tau),
                "e_min_tau": list(self.e_min_tau),
                "p_tau_max": [list(t) for t in self.p_tau_max],
                "p_tau_max_any": list(self.p_tau_max_any), "sync_gap_q99": self.sync_gap_q99,
                "p_competitor": None if self.p_competitor is None else list(self.p_competitor)}


@dataclass(frozen=True)
class VlfRun:
    """Raw per-trial output of a simulation."""

    tau1: np.ndarray
    tau2: np.ndarray
    gap_at_phase_end: np.ndarray
    bar_tau1: np.ndarray | None = None
    bar_tau2: np.ndarray | None = None


def _density_tables(types, p_star, pair):
    def clean(p, w):
        with np.errstate(invalid="ignore"):
            d = density_table(p, w)
        return np.where(w.w > 0, np.nan_to_num(d, neginf=0.0), 0.0)
    first = np.array([[clean(t, w) for w in pair.components] for t in types])
    second = np.array([clean(p_star, w) for w in pair.components])
    return first, second


def _first_crossing(rng, s, gamma, steps_left, joint_cdf, incr, step_chunk=512):
    """Index (0-based, in steps after phase one) where each walk first reaches gamma.

    Walks already at or above gamma return 0; walks that never reach it return
    steps_left. incr[j] holds the increments of all tracked walks for joint
    outcome j.
    """
    first = np.where(s >= gamma, 0, -1)  # per walk
    active = np.flatnonzero(np.any(first < 0, axis=1))
    cur = s.copy()
    done = 0
    while active.size and done < steps_left:
        width = min(step_chunk, steps_left - done)
        u = rng.random((active.size, width))
        j = np.searchsorted(joint_cdf, u, side="right")
        j = np.minimum(j, joint_cdf.size - 1)
        path = cur[active][:, None, :] + np.cumsum(incr[j], axis=1)
        crossed = path >= gamma
        anyc = crossed.any(axis=1)
        idx = crossed.argmax(axis=1) + done + 1
        sub = first[active]
        newly = (sub < 0) & anyc
        sub[newly] = idx[newly]
        first[active] = sub
        cur[active] = path[:, -1, :]
        done += width
        active = active[np.any(first[active] < 0, axis=1)]
    first[first < 0] = steps_left
    return first


def _run_chunk(params, pair, tabs, rng, size, balancing, coupled):
    first, second = tabs
    w1, w2 = pair.w1.w, pair.w2.w
    s1 = np.zeros(size)
    s2 = np.zeros(size)
    bs1 = np.zeros(size)
    bs2 = np.zeros(size)
    if not balancing:
        # ablation: no input adaptation, P* throughout
        first = np.broadcast_to(second, (1,) + second.shape)
        laws = params.p_star[None, :]
    else:
        laws = params.types
    for _ in range(params.L):
        b = (s1 >= s2).astype(np.int64) if balancing else np.zeros(size, dtype=np.int64)
        law = laws[b]
        d1 = first[b, 0]
        d2 = first[b, 1]
        xcounts = rng.multinomial(params.m, law)
        for x in range(w1.shape[0]):
            nx = xcounts[:, x]
            if not np.any(nx):
                continue
            y1 = rng.multinomial(nx, w1[x])
            y2 = rng.multinomial(nx, w2[x])
            s1 += np.einsum("ty,ty->t", y1, d1[:, x, :])
            s2 += np.einsum("ty,ty->t", y2, d2[:, x, :])
            if coupled:
                # an independent codeword from the same law scored against the true outputs
                bs1 += _competitor_sum(rng, y1, law, d1)
                bs2 += _competitor_sum(rng, y2, law, d2)
    gap = np.abs(s1 - s2)

    steps_left = params.tau_max - params.first_phase
    nx_, ny = w1.shape
    p = params.p_star
    # joint outcome (x, y1, y2) for the true codeword
    joint = (p[:, None, None] * w1[:, :, None] * w2[:, None, :]).ravel()
    xs, y1s, y2s = np.unravel_index(np.arange(joint.size), (nx_, ny, ny))
    incr = np.stack([second[0][xs, y1s], second[1][xs, y2s]], axis=1)
    if coupled:
        # add the competitor symbol xb ~ P*, independent of everything
        joint = (joint[:, None] * p[None, :]).ravel()
        xs, y1s, y2s, xb = np.unravel_index(np.arange(joint.size), (nx_, ny, ny, nx_))
        incr = np.stack([second[0][xs, y1s], second[1][xs, y2s],
                         second[0][xb, y1s], second[1][xb, y2s]], axis=1)
        start = np.stack([s1, s2, bs1, bs2], axis=1)
    else:
        start = np.stack([s1, s2], axis=1)
    cdf = np.cumsum(joint)
    cdf /= cdf[-1]
    first_idx = _first_crossing(rng, start, params.gamma, steps_left, cdf, incr)
    taus = params.first_phase + first_idx
    if coupled:
        return taus[:, 0], taus[:, 1], gap, taus[:, 2], taus[:, 3]
    return taus[:, 0], taus[:, 1], gap, None, None


def _competitor_sum(rng, ycounts, law, dens):
    """Density sum of fresh inputs against the outputs, grouped by output symbol.

    A fresh input is independent of the output at its position, so given the
    output counts the competitor inputs are multinomial per output symbol.
    Each decoder gets its own draw; only per-decoder marginals are used.
    """
    size, ny = ycounts.shape
    total = np.zeros(size)
    for y in range(ny):
        ny_ = ycounts[:, y]
        if not np.any(ny_):
            continue
        xb = rng.multinomial(ny_, law)
        total += np.einsum("tx,tx->t", xb, dens[:, :, y])
    return total


def simulate_vlf_run(params: VlfParams, pair: BroadcastPair, trials: int, seed: int,
                     balancing: bool = True, coupled: bool = False,
                     chunk: int = 20000) -> VlfRun:
    tabs = _density_tables(params.types, params.p_star, pair)
    stream = RngStream(seed, VLF_STREAM)
    parts = [_run_chunk(params, pair, tabs, stream.generator(c), size, balancing, coupled)
             for c, (_, size) in enumerate(chunk_sizes(trials, chunk))]
    if not parts:
        e = np.zeros(0, dtype=np.int64)
        return VlfRun(e, e, np.zeros(0))
    cat = [np.concatenate([p[i] for p in parts]) if parts[0][i] is not None else None
           for i in range(5)]
    return VlfRun(*cat)


def summarize(params: VlfParams, run: VlfRun, confidence: float = CONFIDENCE,
              competitor_alpha: float = 1e-3) -> StoppingStats:
    t = run.tau1.size
    lo, hi = params.first_phase, params.tau_max
    mx = np.maximum(run.tau1, run.tau2)
    mn = np.minimum(run.tau1, run.tau2)
    k1 = int(np.sum(run.tau1 == hi))
    k2 = int(np.sum(run.tau2 == hi))
    per = tuple((k,) + cp_interval(k, t, confidence) for k in (k1, k2))
    kmax = max(k1, k2)
    p_any = (kmax / t,) + cp_interval(kmax, t, confidence)
    comp = None
    if run.bar_tau1 is not None:
        comp = tuple(float(cp_upper(int(np.sum(tk >= bk)), t, competitor_alpha))
                     for tk, bk in ((run.tau1, run.bar_tau1), (run.tau2, run.bar_tau2)))
    return StoppingStats(trials=t, e_max_tau=empirical_bernstein(mx, lo, hi, confidence),
                         e_min_tau=empirical_bernstein(mn, lo, hi, confidence),
                         p_tau_max=per, p_tau_max_any=p_any,
                         sync_gap_q99=float(np.quantile(run.gap_at_phase_end, 0.99)),
                         p_competitor=comp)


def simulate_vlf(params: VlfParams, pair: BroadcastPair, trials: int, seed: int,
                 balancing: bool = True, coupled: bool = False) -> StoppingStats:
    return summarize(params, simulate_vlf_run(params, pair, trials, seed, balancing, coupled))


@dataclass(frozen=True)
class VlfPoint:
    ell: float
    logM: float
    eps_certified: float
    q: float
    error_terms: dict
    n_b: int
    mode: str

    def to_dict(self) -> dict:
        return {"ell": self.ell, "logM_nats": self.logM, "eps_certified": self.eps_certified,
                "q": self.q, "error_terms": self.error_terms, "n_b": self.n_b, "mode": self.mode}


def _union_term(params: VlfParams, stats: StoppingStats, mode: str) -> float:
    if mode == "remark5":
        # (M - 1) e^{-gamma}: the competitor count times the per-codeword bound
        if params.log_m_codewords == 0.0:
            return 0.0
        log_m1 = params.log_m_codewords + math.log1p(-math.exp(-params.log_m_codewords))
        return math.exp(log_m1 - params.gamma)
    if mode == "coupled":
        if stats.p_competitor is None:
            raise OutOfRange("coupled mode needs a coupled simulation")
        return min(1.0, math.exp(params.log_m_codewords) * max(stats.p_competitor))
    raise OutOfRange(f"unknown mode {mode!r}")


def vlf_achievable_point(params: VlfParams, pair: BroadcastPair, stats: StoppingStats,
                         epsilon: float, epsilon_star: float | None = None,
                         n_b: int | None = None, mode: str = "remark5") -> VlfPoint:
    """Calibrate q so the certified error meets epsilon and report the point."""
    n_b = params.n_b if n_b is None else n_b
    if epsilon_star is None:
        fn = _eps_star_fn(pair)
        if fn is None:
            raise WrongChannelFamily("supply epsilon_star outside the parallel-BSC family")
        epsilon_star = fn(n_b, 2**params.L)
    union = _union_term(params, stats, mode)
    stop = stats.p_tau_max_any[2]
    x = min(1.0, epsilon_star + union + stop)
    if x > epsilon:
        raise InfeasibleEpsilon(f"error floor {x:.3e} already exceeds epsilon = {epsilon}")
    q = (epsilon - x) / (1.0 - x) if x < 1.0 else 1.0
    ell = (1.0 - q) * (stats.e_max_tau[2] + n_b)
    eps_cert = q + (1.0 - q) * x
    terms = {"eps_star": epsilon_star, "union": union, "tau_max_hit": stop}
    return VlfPoint(ell=ell, logM=params.log_m_codewords, eps_certified=eps_cert, q=q,
                    error_terms=terms, n_b=n_b, mode=mode)


def best_point(params: VlfParams, pair: BroadcastPair, stats: StoppingStats, epsilon: float,
               mode: str = "remark5", n_b_max: int | None = None) -> VlfPoint:
    """Scan n_b from kappa*L upward and keep the point with the smallest ell."""
    fn = _eps_star_fn(pair)
    if fn is None:
        raise WrongChannelFamily("n_b search needs the parallel-BSC family")
    lo = params.n_b
    hi = n_b_max if n_b_max is not None else max(lo + 1, 20 * lo)
    best = None
    for nb in range(lo, hi + 1):
        try:
            pt = vlf_achievable_point(params, pair, stats, epsilon, fn(nb, 2**params.L), nb, mode)
        except InfeasibleEpsilon:
            continue
        if best is None or pt.ell < best.ell:
            best = pt
    if best is None:
        raise InfeasibleEpsilon("no n_b in range meets epsilon")
    return best
