"""Monte Carlo evaluation of the fixed-length feedback achievability bound.

The scheme sends L blocks of m symbols. Blocks before the last use one of two
types tilted around P*. The type for each block favors whichever decoder has
the smaller accumulated density. The last block uses P* if the weighted
density has reached gamma1, otherwise P1* or P2* chosen by a fair coin. The
block-type sequence itself is sent afterwards over n_b uses without feedback.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import BroadcastPair, ChannelAnalysis, density_table, divergences
from .errors import BlocklengthTooSmall, NoFeasibleGamma, OutOfRange, WrongChannelFamily
from .rcu import epsilon_star_parallel_bsc, parallel_bsc_parameters
from .stoch import RngStream, chunk_sizes, cp_upper, q_inv

NUM_TYPES = 5
FLF_STREAM = 0x464C46
MIN_TRIALS = 10_000
CONFIDENCE_ALPHA = 1e-3
GAMMA_GRID = 512


def icbrt(n: int) -> int:
    """Largest integer r with r**3 <= n."""
    if n < 0:
        raise OutOfRange("cube root of a negative number")
    r = int(round(n ** (1.0 / 3.0)))
    while r**3 > n:
        r -= 1
    while (r + 1) ** 3 <= n:
        r += 1
    return r


def round_type(p, denom: int) -> np.ndarray:
    """Largest-remainder rounding of p to integer counts summing to denom."""
    p = np.asarray(p, dtype=float)
    if np.any(p < -1e-15):
        raise BlocklengthTooSmall("tilted distribution has a negative entry")
    p = np.clip(p, 0.0, None)
    p = p / p.sum()
    raw = p * denom
    counts = np.floor(raw).astype(np.int64)
    short = denom - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def balancing_direction(pair: BroadcastPair, p_star, rho: float, rule: str = "gradient"):
    """Zero-sum direction v with grad I1 . v = rho.

    "gradient" projects the divergence vector D1 onto the zero-sum subspace,
    which is the direction of steepest increase. "canonical" uses the first
    e_x - e_last with a positive derivative.
    """
    d1 = divergences(p_star, pair.w1)
    size = d1.size
    if rule == "gradient":
        v = d1 - d1.mean()
    elif rule == "canonical":
        v = None
        for x in range(size - 1):
            cand = np.zeros(size)
            cand[x], cand[-1] = 1.0, -1.0
            if float(np.dot(cand, d1)) > 1e-12:
                v = cand
                break
        if v is None:
            raise BlocklengthTooSmall("no canonical direction increases I1")
    else:
        raise OutOfRange(f"unknown direction rule {rule!r}")
    slope = float(np.dot(v, d1))
    if slope <= 1e-14:
        raise BlocklengthTooSmall("I1 is flat at P*; balancing direction undefined")
    return v * (rho / slope)


@dataclass(frozen=True)
class FlfSchemeParams:
    n: int
    L: int
    m: int
    S: int
    kappa: int
    n_b: int
    counts: np.ndarray  # S x |X| integer compositions, rows sum to m
    rho: float
    v0: np.ndarray
    gamma: float
    gamma1: float
    gamma2: float
    zeta: float
    tau_slack: float
    eta: float
    capacity_c: float
    epsilon: float
    direction_rule: str = "gradient"
    n_b_rule: str = "kappa"

    def __post_init__(self):
        if self.L * self.m + self.n_b != self.n:
            raise OutOfRange("L*m + n_b must equal n")
        if not (0.0 < self.tau_slack < self.epsilon):
            raise OutOfRange("tau slack must lie in (0, epsilon)")
        if np.any(self.counts.sum(axis=1) != self.m):
            raise OutOfRange("each type must have denominator m")

    @property
    def types(self) -> np.ndarray:
        return self.counts / float(self.m)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "L": self.L, "m": self.m, "S": self.S, "kappa": self.kappa,
            "n_b": self.n_b, "types": self.counts.tolist(), "rho": self.rho,
            "v0": self.v0.tolist(), "gamma": self.gamma, "gamma1": self.gamma1,
            "gamma2": None if math.isnan(self.gamma2) else self.gamma2,
            "zeta": self.zeta, "tau_slack": self.tau_slack, "eta": self.eta,
            "capacity_c": self.capacity_c, "epsilon": self.epsilon,
            "direction_rule": self.direction_rule, "n_b_rule": self.n_b_rule,
        }


def _eps_star_fn(pair: BroadcastPair):
    try:
        q1, q2 = parallel_bsc_parameters(pair)
    except WrongChannelFamily:
        return None
    return lambda n_b, m_tilde: epsilon_star_parallel_bsc(n_b, m_tilde, q1, q2)


def smallest_n_b(eps_star_fn, m_tilde, lo: int, hi: int, target: float) -> int:
    """Smallest n_b in [lo, hi] with eps_star(n_b) <= target, or hi if none."""
    if eps_star_fn(lo, m_tilde) <= target:
        return lo
    if eps_star_fn(hi, m_tilde) > target:
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if eps_star_fn(mid, m_tilde) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def default_params(n: int, epsilon: float, analysis: ChannelAnalysis, pair: BroadcastPair,
                   rho: float = 1.0, direction_rule: str = "gradient",
                   n_b_rule="kappa", eps_star_target: float | None = None) -> FlfSchemeParams:
    """Scheme parameters for blocklength n.

    n_b_rule: "kappa" reserves about kappa*L uses for the type sequence;
    "auto" grows n_b until the no-feedback error drops below eps_star_target
    (default epsilon/10), which needs the parallel-BSC family; an int fixes it.
    """
    if not (0.0 < epsilon < 0.5):
        raise OutOfRange("epsilon must lie in (0, 1/2)")
    c = analysis.capacity_c
    if not c > 0:
        raise BlocklengthTooSmall("zero capacity")
    L = icbrt(n)
    kappa = math.floor(math.log(NUM_TYPES) / c) + 1
    if L < 2:
        raise BlocklengthTooSmall(f"n = {n} gives fewer than two blocks")
    n_b_min = kappa * L
    if isinstance(n_b_rule, (int, np.integer)) and not isinstance(n_b_rule, bool):
        n_b_min = int(n_b_rule)
        rule_name = "fixed"
    elif n_b_rule == "auto":
        fn = _eps_star_fn(pair)
        if fn is None:
            raise WrongChannelFamily("automatic n_b needs the parallel-BSC family")
        target = epsilon / 10.0 if eps_star_target is None else eps_star_target
        n_b_min = smallest_n_b(fn, NUM_TYPES**L, kappa * L, n - L, target)
        rule_name = "auto"
    elif n_b_rule == "kappa":
        rule_name = "kappa"
    else:
        raise OutOfRange(f"unknown n_b rule {n_b_rule!r}")
    m = (n - n_b_min) // L
    if m < 1:
        raise BlocklengthTooSmall(f"n = {n} leaves no symbols per block")
    n_b = n - L * m

    p_star = analysis.p_star
    v0 = balancing_direction(pair, p_star, rho, direction_rule)
    shift = v0 * n ** (-1.0 / 3.0)
    tilted = [p_star + shift, p_star - shift]
    if any(np.any(t < 0) for t in tilted):
        raise BlocklengthTooSmall(f"n = {n} too small: P* -/+ v0 n^(-1/3) leaves the simplex")
    counts = np.array([round_type(t, m) for t in
                       tilted + [p_star, analysis.p1_star, analysis.p2_star]])

    gamma = L * m * c - math.sqrt((L - 1) * m * analysis.v_weighted) * q_inv(2.0 * epsilon)
    gamma1 = gamma - m * c + n ** (1.0 / 3.0) * math.log(n)
    tau = min(1.0 / math.sqrt(n), epsilon / 2.0)
    return FlfSchemeParams(n=n, L=L, m=m, S=NUM_TYPES, kappa=kappa, n_b=n_b, counts=counts,
                           rho=rho, v0=v0, gamma=gamma, gamma1=gamma1, gamma2=math.nan,
                           zeta=n ** (1.0 / 3.0), tau_slack=tau, eta=analysis.eta,
                           capacity_c=c, epsilon=epsilon, direction_rule=direction_rule,
                           n_b_rule=rule_name)


def _type_densities(params: FlfSchemeParams, pair: BroadcastPair) -> np.ndarray:
    """dens[s, k, x, y] = i_{P_s, W_k}(x; y), with zero where W_k(y|x) = 0."""
    out = np.zeros((params.S, 2, pair.num_inputs, pair.num_outputs))
    for s, p in enumerate(params.types):
        for k, w in enumerate(pair.components):
            with np.errstate(invalid="ignore"):
                d = density_table(p, w)
            out[s, k] = np.where(w.w > 0, np.nan_to_num(d, neginf=0.0), 0.0)
    return out


@dataclass(frozen=True)
class TrialTranscript:
    b_sequence: tuple
    density1: np.ndarray  # accumulated after each block
    density2: np.ndarray
    final_densities: tuple


def _final_block_type(weighted, gamma1, coin):
    return 3 if weighted >= gamma1 else 4 + int(coin)


def simulate_trial(params: FlfSchemeParams, pair: BroadcastPair, rng_seed: int) -> TrialTranscript:
    """One literal run: permuted composition per block, symbol-by-symbol outputs."""
    rng = np.random.default_rng(rng_seed)
    dens = _type_densities(params, pair)
    cdf1 = np.cumsum(pair.w1.w, axis=1)
    cdf2 = np.cumsum(pair.w2.w, axis=1)
    s1 = s2 = 0.0
    bs, acc1, acc2 = [], [], []
    for block in range(params.L):
        if block < params.L - 1:
            b = 1 + int(s1 >= s2)
        else:
            weighted = params.eta * s1 + (1.0 - params.eta) * s2
            b = _final_block_type(weighted, params.gamma1, rng.integers(2))
        x = rng.permutation(np.repeat(np.arange(pair.num_inputs), params.counts[b - 1]))
        y1 = np.minimum((rng.random(x.size)[:, None] > cdf1[x]).sum(axis=1), pair.num_outputs - 1)
        y2 = np.minimum((rng.random(x.size)[:, None] > cdf2[x]).sum(axis=1), pair.num_outputs - 1)
        s1 += float(dens[b - 1, 0, x, y1].sum())
        s2 += float(dens[b - 1, 1, x, y2].sum())
        bs.append(b)
        acc1.append(s1)
        acc2.append(s2)
    return TrialTranscript(tuple(bs), np.array(acc1), np.array(acc2), (s1, s2))


@dataclass(frozen=True)
class FlfBatch:
    """Per-trial summaries from a batch run."""

    final1: np.ndarray
    final2: np.ndarray
    pre_final1: np.ndarray  # accumulated densities after L-1 blocks
    pre_final2: np.ndarray
    last_type: np.ndarray
    type_counts: np.ndarray  # per trial, how many of the first L-1 blocks used type 1

    @property
    def trials(self) -> int:
        return int(self.final1.size)


def _block_increments(rng, counts_by_trial, dens_by_trial, w):
    """Sum of densities over a block given per-trial input counts.

    Only output counts per input matter for the sum, so each input's outputs
    are drawn as one multinomial.
    """
    total = np.zeros(counts_by_trial.shape[0])
    for x in range(w.shape[0]):
        nx = counts_by_trial[:, x]
        if not np.any(nx):
            continue
        ycounts = rng.multinomial(nx, w[x])
        total += np.einsum("ty,ty->t", ycounts, dens_by_trial[:, x, :])
    return total


def _simulate_chunk(params, pair, dens, rng, size, balancing=True):
    w1, w2 = pair.w1.w, pair.w2.w
    s1 = np.zeros(size)
    s2 = np.zeros(size)
    ones = np.zeros(size, dtype=np.int64)
    for _ in range(params.L - 1):
        b = (1 + (s1 >= s2)) if balancing else np.ones(size, dtype=np.int64)
        idx = b - 1
        ones += (b == 1)
        s1 += _block_increments(rng, params.counts[idx], dens[idx, 0], w1)
        s2 += _block_increments(rng, params.counts[idx], dens[idx, 1], w2)
    pre1, pre2 = s1.copy(), s2.copy()
    weighted = params.eta * s1 + (1.0 - params.eta) * s2
    coin = rng.integers(2, size=size)
    last = np.where(weighted >= params.gamma1, 3, 4 + coin)
    idx = last - 1
    s1 = s1 + _block_increments(rng, params.counts[idx], dens[idx, 0], w1)
    s2 = s2 + _block_increments(rng, params.counts[idx], dens[idx, 1], w2)
    return s1, s2, pre1, pre2, last, ones


def simulate_batch(params: FlfSchemeParams, pair: BroadcastPair, trials: int, seed: int,
                   chunk: int = 8192, balancing: bool = True) -> FlfBatch:
    """Many independent trials; chunk c always uses stream (seed, c)."""
    dens = _type_densities(params, pair)
    stream = RngStream(seed, FLF_STREAM)
    parts = []
    for c, (_, size) in enumerate(chunk_sizes(trials, chunk)):
        parts.append(_simulate_chunk(params, pair, dens, stream.generator(c), size, balancing))
    if not parts:
        empty = np.zeros(0)
        return FlfBatch(empty, empty, empty, empty, np.zeros(0, dtype=np.int64),
                        np.zeros(0, dtype=np.int64))
    cols = [np.concatenate([p[i] for p in parts]) for i in range(6)]
    return FlfBatch(*cols)


def penalty_terms(params: FlfSchemeParams, num_inputs: int) -> dict:
    S, L, m = params.S, params.L, params.m
    terms = {
        "log_tau_half": math.log(params.tau_slack / 2.0),
        "type_count": -S * L * num_inputs * math.log1p(m),
        "type_sequence": -L * math.log(S),
        "zeta": -params.zeta,
    }
    terms["total"] = sum(terms.values())
    return terms


@dataclass(frozen=True)
class FlfPoint:
    n_total: int
    logM: float
    eps_certified: float
    gamma: float
    quantile_upper: float  # CP upper bound on max_k P[i_k <= gamma]
    target: float
    penalties: dict
    eps_star: float
    eps_star_source: str
    trials: int

    def to_dict(self) -> dict:
        return {"n_total": self.n_total, "logM_nats": self.logM,
                "eps_certified": self.eps_certified, "gamma": self.gamma,
                "quantile_upper": self.quantile_upper, "target": self.target,
                "penalties": self.penalties, "eps_star": self.eps_star,
                "eps_star_source": self.eps_star_source, "trials": self.trials}


def gamma_grid(final1, final2, points: int = GAMMA_GRID) -> np.ndarray:
    both = np.concatenate([final1, final2])
    mu, sd = float(both.mean()), float(both.std())
    if sd == 0.0:
        sd = max(1.0, abs(mu)) * 1e-9
    return np.linspace(mu - 6.0 * sd, mu + 6.0 * sd, points)


def certify_from_batch(params: FlfSchemeParams, pair: BroadcastPair, batch: FlfBatch,
                       epsilon: float, eps_star: float | None = None,
                       grid: np.ndarray | None = None,
                       alpha: float = CONFIDENCE_ALPHA) -> FlfPoint:
    target = epsilon - params.tau_slack - math.exp(-params.zeta)
    if target <= 0:
        raise NoFeasibleGamma("epsilon - tau - exp(-zeta) is not positive")
    if eps_star is None:
        fn = _eps_star_fn(pair)
        if fn is None:
            raise WrongChannelFamily("supply eps_star for channels outside the parallel-BSC family")
        eps_star = fn(params.n_b, params.S**params.L)
        source = "parallel-bsc rcu"
    else:
        source = "user"
    if grid is None:
        grid = gamma_grid(batch.final1, batch.final2)
    t = batch.trials
    s1 = np.sort(batch.final1)
    s2 = np.sort(batch.final2)
    k1 = np.searchsorted(s1, grid, side="right")
    k2 = np.searchsorted(s2, grid, side="right")
    upper = np.maximum(cp_upper(k1, t, alpha), cp_upper(k2, t, alpha))
    ok = np.flatnonzero(upper < target)
    if ok.size == 0:
        raise NoFeasibleGamma("no grid gamma meets the target at this trial budget")
    j = int(ok.max())
    pen = penalty_terms(params, pair.num_inputs)
    return FlfPoint(n_total=params.L * params.m + params.n_b, logM=float(grid[j]) + pen["total"],
                    eps_certified=min(1.0, epsilon + eps_star), gamma=float(grid[j]),
                    quantile_upper=float(upper[j]), target=target, penalties=pen,
                    eps_star=float(eps_star), eps_star_source=source, trials=t)


def estimate_quantile_and_bound(params: FlfSchemeParams, pair: BroadcastPair, trials: int,
                                epsilon: float, seed: int = 0, eps_star: float | None = None,
                                chunk: int = 8192) -> FlfPoint:
    if trials < MIN_TRIALS:
        raise OutOfRange(f"need at least {MIN_TRIALS} trials")
    target = epsilon - params.tau_slack - math.exp(-params.zeta)
    if target <= 0:
        raise NoFeasibleGamma("epsilon - tau - exp(-zeta) is not positive")
    batch = simulate_batch(params, pair, trials, seed, chunk)
    return certify_from_batch(params, pair, batch, epsilon, eps_star)
