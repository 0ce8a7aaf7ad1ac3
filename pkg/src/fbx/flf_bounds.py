"""Fixed-length bounds: the exact feedback converse, its Chebyshev relaxation,
and the normal approximation.

The exact converse needs the law of eta*i1(x;Y1) + (1-eta)*i2(x;Y2) to be the
same for every input x. Then the accumulated density after n uses is a sum of
n i.i.d. copies of that law, whatever the encoder does with the feedback.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .channel import BroadcastPair, ChannelAnalysis, density_table, weighted_variance_by_input
from .errors import DegenerateDerivatives, LatticeFailure, NotInvariant, OutOfRange
from .stoch import (MAX_SUPPORT, IntPmf, lattice_convolve_power, pmf_from_atoms, q_inv,
                    quantized_pmf)

__all__ = ["IncrementLaw", "ConverseQuery", "ConverseResult", "increment_law", "converse_logM",
           "converse_point", "converse_chebyshev", "normal_approx_feedback", "q_inv",
           "lambda_candidates", "sum_cdf"]

SNAP_TOL = 1e-9
MASS_TOL = 1e-10


def _merge_atoms(values, probs, tol=SNAP_TOL):
    order = np.argsort(values, kind="stable")
    values, probs = np.asarray(values)[order], np.asarray(probs)[order]
    out_v, out_p = [], []
    for v, p in zip(values, probs):
        if out_v and v - out_v[-1] <= tol:
            out_p[-1] += p
        else:
            out_v.append(float(v))
            out_p.append(float(p))
    return np.array(out_v), np.array(out_p)


def _component_atoms(dens_row, w_row, weight):
    keep = w_row > 0
    return _merge_atoms(weight * dens_row[keep], w_row[keep])


@dataclass(frozen=True)
class IncrementLaw:
    """Common per-input law of the weighted single-letter density.

    `components` are independent lattice pmfs whose sum has law (atoms, probs).
    """

    atoms: np.ndarray
    probs: np.ndarray
    components: tuple
    approximate: bool = False

    def mean(self) -> float:
        return float(np.dot(self.atoms, self.probs))

    def var(self) -> float:
        m = self.mean()
        return float(np.dot((self.atoms - m) ** 2, self.probs))

    def as_pmf(self) -> IntPmf:
        if len(self.components) != 1:
            raise LatticeFailure("law spans several incommensurate lattices")
        return self.components[0]

    def n_fold(self, n: int, max_support: int = MAX_SUPPORT):
        return tuple(lattice_convolve_power(c, n, max_support) for c in self.components)


def increment_law(analysis: ChannelAnalysis, pair: BroadcastPair,
                  snap_tol: float = SNAP_TOL, mass_tol: float = MASS_TOL,
                  quantize_bins: int = 2**16) -> IncrementLaw:
    eta = analysis.eta
    if math.isnan(eta):
        raise DegenerateDerivatives("eta is undefined for this pair")
    p = analysis.p_star
    d1, d2 = density_table(p, pair.w1), density_table(p, pair.w2)
    w1, w2 = pair.w1.w, pair.w2.w

    laws = []
    for x in range(pair.num_inputs):
        a1 = _component_atoms(d1[x], w1[x], eta)
        a2 = _component_atoms(d2[x], w2[x], 1.0 - eta)
        vals = (a1[0][:, None] + a2[0][None, :]).ravel()
        mass = (a1[1][:, None] * a2[1][None, :]).ravel()
        laws.append((_merge_atoms(vals, mass, snap_tol), a1, a2))

    (ref_v, ref_p), a1, a2 = laws[0]
    for x, ((v, pr), _, _) in enumerate(laws[1:], start=1):
        if v.size != ref_v.size or np.any(np.abs(v - ref_v) > snap_tol) \
                or np.any(np.abs(pr - ref_p) > mass_tol):
            raise NotInvariant(f"increment law at input {x} differs from input 0")

    # prefer one lattice for the whole law, then one lattice per decoder
    try:
        comps = (pmf_from_atoms(ref_v, ref_p, snap_tol),)
        approx = False
    except LatticeFailure:
        try:
            c1 = pmf_from_atoms(*a1, tol=snap_tol)
            c2 = pmf_from_atoms(*a2, tol=snap_tol)
            comps = (c1, c2)
            approx = False
        except LatticeFailure:
            comps = (quantized_pmf(ref_v, ref_p, quantize_bins),)
            approx = True
    return IncrementLaw(ref_v, ref_p, comps, approx)


def sum_cdf(parts, t) -> np.ndarray:
    """P[A + B + ... <= t] for independent lattice pmfs (at most two)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if len(parts) == 1:
        return parts[0].cdf(t)
    if len(parts) != 2:
        raise LatticeFailure("sum_cdf handles one or two factors")
    a, b = sorted(parts, key=len)
    pa = a.probs
    keep = pa > 0
    va, pa = a.values[keep], pa[keep]
    out = np.empty(t.size)
    for i, ti in enumerate(t):
        out[i] = float(np.dot(pa, b.cdf(ti - va)))
    return np.minimum(out, 1.0)


def _support(parts):
    lo = sum(float(p.values[0]) for p in parts)
    hi = sum(float(p.values[-1]) for p in parts)
    return lo, hi


def _first_exceedance(parts, alpha: float) -> float:
    """Smallest s with P[S <= s] > alpha; an upper bracket when S has two factors."""
    if len(parts) == 1:
        pmf = parts[0]
        cum = np.cumsum(pmf.probs)
        idx = int(np.searchsorted(cum, alpha, side="right"))
        return float(pmf.values[min(idx, len(pmf) - 1)])
    lo, hi = _support(parts)
    lo -= 1.0
    if sum_cdf(parts, hi)[0] <= alpha:
        return hi
    scale = max(1.0, abs(lo), abs(hi))
    while hi - lo > 1e-12 * scale:
        mid = 0.5 * (lo + hi)
        if sum_cdf(parts, mid)[0] > alpha:
            hi = mid
        else:
            lo = mid
    return hi


LambdaRule = Union[float, str]


@dataclass(frozen=True)
class ConverseQuery:
    n: int
    epsilon: float
    lambda_rule: LambdaRule = "log-n"

    def __post_init__(self):
        if not (0.0 < self.epsilon < 0.5):
            raise OutOfRange("converse needs epsilon in (0, 1/2)")
        if self.n < 1:
            raise OutOfRange("blocklength must be positive")
        if isinstance(self.lambda_rule, str) and self.lambda_rule not in ("log-n", "grid"):
            raise OutOfRange(f"unknown lambda rule {self.lambda_rule!r}")


@dataclass(frozen=True)
class ConverseResult:
    n: int
    epsilon: float
    logM: float
    lambda_used: float
    method: str
    approximate: bool = False

    @property
    def vacuous(self) -> bool:
        return math.isinf(self.logM)


def lambda_candidates(n: int, rule: LambdaRule):
    if not isinstance(rule, str):
        if rule <= 0:
            raise OutOfRange("lambda must be positive")
        return [float(rule)]
    base = math.log(n)
    if rule == "log-n":
        return [base]
    return [base * 2.0**j for j in range(-3, 4)]


def converse_point(pair: BroadcastPair, analysis: ChannelAnalysis, q: ConverseQuery,
                   law: IncrementLaw | None = None, parts=None) -> ConverseResult:
    """Tightest log M allowed by eps >= P[S_n <= log M - lam]/2 - exp(-lam).

    S_n is the n-fold sum of the increment law. Over several lambda values,
    the smallest (tightest) bound is reported.
    """
    if law is None:
        law = increment_law(analysis, pair)
    best = None
    for lam in lambda_candidates(q.n, q.lambda_rule):
        alpha = 2.0 * (q.epsilon + math.exp(-lam))
        if alpha >= 1.0:
            val = math.inf
        else:
            if parts is None:
                parts = law.n_fold(q.n)
            val = _first_exceedance(parts, alpha) + lam
        if best is None or val < best[0]:
            best = (val, lam)
    return ConverseResult(q.n, q.epsilon, best[0], best[1], "exact", law.approximate)


def converse_logM(pair: BroadcastPair, analysis: ChannelAnalysis, q: ConverseQuery,
                  law: IncrementLaw | None = None) -> float:
    return converse_point(pair, analysis, q, law).logM


def converse_chebyshev(analysis: ChannelAnalysis, n: int, epsilon: float,
                       pair: BroadcastPair | None = None, k_var: float | None = None) -> float:
    """n C + sqrt(K n / (1 - 2(eps + 1/n))) + log n with K the largest
    per-input variance of the weighted density."""
    if not (0.0 < epsilon < 0.5):
        raise OutOfRange("epsilon must lie in (0, 1/2)")
    if k_var is None:
        if pair is None:
            raise OutOfRange("need the channel pair or an explicit variance bound")
        k_var = float(np.max(weighted_variance_by_input(pair, analysis)))
    denom = 1.0 - 2.0 * (epsilon + 1.0 / n)
    if denom <= 0:
        return math.inf
    return n * analysis.capacity_c + math.sqrt(k_var * n / denom) + math.log(n)


def normal_approx_feedback(analysis: ChannelAnalysis, n: int, epsilon: float) -> float:
    if not (0.0 < epsilon < 0.5):
        raise OutOfRange("epsilon must lie in (0, 1/2)")
    return n * analysis.capacity_c - math.sqrt(n * analysis.v_weighted) * q_inv(2.0 * epsilon)
