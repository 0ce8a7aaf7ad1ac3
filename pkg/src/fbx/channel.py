"""Discrete memoryless channels, broadcast pairs and single-letter quantities.

All logarithms are natural. Conventions:

* ``w[x, y] = W(y|x)``, rows sum to one.
* an input distribution is a plain probability vector.
* a direction ``v`` is a real vector whose entries sum to zero.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .errors import (DegenerateDerivatives, DivergentDensity,
                     InvalidDistribution, IoError, NonConvergence, ZeroSumViolation)

STOCHASTIC_TOL = 1e-12
NEG_INF = -math.inf


@dataclass(frozen=True)
class Dmc:
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise InvalidDistribution("channel matrix must be 2-d and non-empty")
        if np.any(~np.isfinite(w)) or np.any(w < 0) or np.any(w > 1):
            raise InvalidDistribution("channel entries must lie in [0, 1]")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
            raise InvalidDistribution("channel rows must sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def num_inputs(self) -> int:
        return self.w.shape[0]

    @property
    def num_outputs(self) -> int:
        return self.w.shape[1]


@dataclass(frozen=True)
class BroadcastPair:
    w1: Dmc
    w2: Dmc

    def __post_init__(self):
        if not isinstance(self.w1, Dmc):
            object.__setattr__(self, "w1", Dmc(self.w1))
        if not isinstance(self.w2, Dmc):
            object.__setattr__(self, "w2", Dmc(self.w2))
        if self.w1.w.shape != self.w2.w.shape:
            raise InvalidDistribution("component channels must share alphabets")

    @property
    def num_inputs(self) -> int:
        return self.w1.num_inputs

    @property
    def num_outputs(self) -> int:
        return self.w1.num_outputs

    @property
    def components(self):
        return (self.w1, self.w2)

    def to_dict(self) -> dict:
        return {"num_inputs": self.num_inputs, "num_outputs": self.num_outputs,
                "w1": self.w1.w.tolist(), "w2": self.w2.w.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BroadcastPair":
        try:
            pair = cls(Dmc(d["w1"]), Dmc(d["w2"]))
        except KeyError as exc:
            raise InvalidDistribution(f"channel file missing field {exc}") from None
        if pair.num_inputs != d.get("num_inputs", pair.num_inputs) or \
                pair.num_outputs != d.get("num_outputs", pair.num_outputs):
            raise InvalidDistribution("declared alphabet sizes disagree with matrices")
        return pair


def pair_to_json(pair: BroadcastPair) -> str:
    return json.dumps(pair.to_dict(), sort_keys=True, indent=2) + "\n"


def save_pair(pair: BroadcastPair, path) -> None:
    try:
        Path(path).write_text(pair_to_json(pair))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_pair(path) -> BroadcastPair:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidDistribution(f"channel file is not JSON: {exc}") from None
    return BroadcastPair.from_dict(data)


def pair_digest(pair: BroadcastPair) -> str:
    """Content hash of the canonical channel serialization."""
    return hashlib.sha256(pair_to_json(pair).encode()).hexdigest()


def check_dist(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(~np.isfinite(p)) or np.any(p < 0):
        raise InvalidDistribution("input distribution must be a nonnegative vector")
    if abs(p.sum() - 1.0) > STOCHASTIC_TOL:
        raise InvalidDistribution("input distribution must sum to 1")
    return p


def check_direction(v, size: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (size,):
        raise ZeroSumViolation("direction has the wrong length")
    if abs(v.sum()) > STOCHASTIC_TOL:
        raise ZeroSumViolation("direction entries must sum to zero")
    return v


def _as_matrix(w) -> np.ndarray:
    return w.w if isinstance(w, Dmc) else np.asarray(w, dtype=float)


# ---------------------------------------------------------------------------
# single-letter quantities

def density_table(p, w) -> np.ndarray:
    """Matrix of log W(y|x) - log PW(y); -inf where W(y|x) = 0."""
    w = _as_matrix(w)
    q = p @ w
    if np.any((w > 0) & (q[None, :] <= 0)):
        raise DivergentDensity("W(y|x) > 0 at an output with PW(y) = 0")
    with np.errstate(divide="ignore"):
        out = np.log(w) - np.log(np.where(q > 0, q, 1.0))[None, :]
    return np.where(w > 0, out, NEG_INF)


def info_density(p, w, x: int, y: int) -> float:
    p = check_dist(p)
    wm = _as_matrix(w)
    if wm[x, y] == 0.0:
        return NEG_INF
    q = float(p @ wm[:, y])
    if q <= 0.0:
        raise DivergentDensity("PW(y) = 0 while W(y|x) > 0")
    return math.log(wm[x, y]) - math.log(q)


def divergences(p, w) -> np.ndarray:
    """D(W(.|x) || PW) for every input x."""
    w = _as_matrix(w)
    q = p @ w
    with np.errstate(divide="ignore", invalid="ignore"):
        logq = np.log(q)
        cross = np.where(w > 0, w * logq[None, :], 0.0)
    if np.any((w > 0) & (q[None, :] <= 0)):
        bad = np.any((w > 0) & (q[None, :] <= 0), axis=1)
        out = special.xlogy(w, w).sum(axis=1) - cross.sum(axis=1)
        return np.where(bad, math.inf, out)
    return special.xlogy(w, w).sum(axis=1) - cross.sum(axis=1)


def mutual_information(p, w) -> float:
    p = check_dist(p)
    d = divergences(p, w)
    return float(np.dot(p[p > 0], d[p > 0]))


def conditional_variances(p, w) -> np.ndarray:
    """Var[i(x; Y) | X = x] for each input."""
    w = _as_matrix(w)
    q = p @ w
    with np.errstate(divide="ignore", invalid="ignore"):
        dens = np.where(w > 0, np.log(np.where(w > 0, w, 1.0)) - np.log(np.where(q > 0, q, 1.0))[None, :], 0.0)
    mean = (w * dens).sum(axis=1)
    return np.maximum((w * (dens - mean[:, None]) ** 2).sum(axis=1), 0.0)


def cond_info_variance(p, w) -> float:
    p = check_dist(p)
    return float(np.dot(p, conditional_variances(p, w)))


def directional_derivative(w, p_star, v) -> float:
    p_star = check_dist(p_star)
    v = check_direction(v, p_star.size)
    return float(np.dot(v, divergences(p_star, w)))


def probe_directions(size: int, seed: int = 0, extra: int = 64):
    """Canonical zero-sum directions e_x - e_last, then seeded random ones."""
    for x in range(size - 1):
        v = np.zeros(size)
        v[x], v[-1] = 1.0, -1.0
        yield v
    rng = np.random.default_rng(seed)
    for _ in range(extra):
        v = rng.standard_normal(size)
        yield v - v.mean()


def eta_from_direction(pair: BroadcastPair, p_star, v) -> float:
    g1 = directional_derivative(pair.w1, p_star, v)
    g2 = directional_derivative(pair.w2, p_star, v)
    return g2 / (g2 - g1)


def compute_eta(pair: BroadcastPair, p_star, threshold: float = 1e-9, seed: int = 0) -> float:
    p_star = check_dist(p_star)
    for v in probe_directions(p_star.size, seed):
        g1 = directional_derivative(pair.w1, p_star, v)
        if abs(g1) > threshold:
            g2 = directional_derivative(pair.w2, p_star, v)
            if g2 == g1:
                continue
            return g2 / (g2 - g1)
    raise DegenerateDerivatives("no probe direction moves I_1; C_k = C or p_star is not optimal")


# ---------------------------------------------------------------------------
# maximin solver

def _weighted_ba(ws, lams, p, tol, max_iter):
    """Blahut-Arimoto for max_P sum_k lam_k I_k(P), warm-started at p.

    Returns (p, lower, upper) with lower = objective at p and upper the
    certified bound max_x sum_k lam_k D_k(x).
    """
    terms = [(lam, w, special.xlogy(w, w).sum(axis=1)) for lam, w in zip(lams, ws) if lam > 0]
    lower = upper = math.nan
    for _ in range(max_iter):
        d = 0.0
        for lam, w, negent in terms:
            with np.errstate(divide="ignore", invalid="ignore"):
                logq = np.log(p @ w)
                d = d + lam * (negent - np.where(w > 0, w * logq, 0.0).sum(axis=1))
        lower = float(np.dot(p, d))
        upper = float(d.max())
        if upper - lower <= tol:
            break
        p = p * np.exp(d - upper)
        p = np.maximum(p / p.sum(), 1e-250)
        p /= p.sum()
    return p, lower, upper


def _newton_polish(w1, w2, p, lam, iters=30):
    """Solve lam D1 + (1-lam) D2 = c on the support, I1 = I2, sum p = 1."""
    n = p.size
    z = np.concatenate([p, [lam, float(np.dot(p, lam * divergences(p, w1) + (1 - lam) * divergences(p, w2)))]])
    for _ in range(iters):
        p, lam, c = z[:n], z[n], z[n + 1]
        if np.any(p <= 0) or not (0 < lam < 1):
            return None
        d1, d2 = divergences(p, w1), divergences(p, w2)
        f = np.concatenate([lam * d1 + (1 - lam) * d2 - c, [np.dot(p, d1 - d2), p.sum() - 1.0]])
        if np.max(np.abs(f)) < 1e-15:
            break
        q1, q2 = p @ w1, p @ w2
        h1 = -(w1 / q1) @ w1.T
        h2 = -(w2 / q2) @ w2.T
        jac = np.zeros((n + 2, n + 2))
        jac[:n, :n] = lam * h1 + (1 - lam) * h2
        jac[:n, n] = d1 - d2
        jac[:n, n + 1] = -1.0
        jac[n, :n] = d1 - d2
        jac[n + 1, :n] = 1.0
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            return None
        z = z + step
    p, lam = z[:n], z[n]
    if np.any(p <= 0) or not (0 < lam < 1):
        return None
    return p / p.sum(), float(lam)


def _gap(w1, w2, p, lam):
    d = lam * divergences(p, w1) + (1 - lam) * divergences(p, w2)
    return float(d.max()) - min(mutual_information(p, w1), mutual_information(p, w2))


@dataclass(frozen=True)
class ChannelAnalysis:
    p_star: np.ndarray
    capacity_c: float
    c1: float
    c2: float
    v1: float
    v2: float
    eta: float
    v_weighted: float
    condition_eq21_holds: bool
    condition_tolerance: float
    p1_star: np.ndarray = field(repr=False, default=None)
    p2_star: np.ndarray = field(repr=False, default=None)
    dual_weight: float = math.nan
    duality_gap: float = math.nan
    iterations: int = 0
    assumption_report: tuple = ()
    apparently_unique: bool = True

    @property
    def assumptions_hold(self) -> bool:
        return not self.assumption_report

    def to_dict(self) -> dict:
        def num(x):
            return None if isinstance(x, float) and math.isnan(x) else x
        return {
            "p_star": self.p_star.tolist(),
            "capacity_c": self.capacity_c,
            "c1": self.c1,
            "c2": self.c2,
            "v1": self.v1,
            "v2": self.v2,
            "eta": num(self.eta),
            "v_weighted": num(self.v_weighted),
            "condition_eq21_holds": self.condition_eq21_holds,
            "condition_tolerance": self.condition_tolerance,
            "solver": {
                "p1_star": self.p1_star.tolist(),
                "p2_star": self.p2_star.tolist(),
                "dual_weight": num(self.dual_weight),
                "duality_gap": self.duality_gap,
                "iterations": self.iterations,
            },
            "assumptions": {
                "hold": self.assumptions_hold,
                "violations": list(self.assumption_report),
                "apparently_unique": self.apparently_unique,
            },
        }


def maximin_value(pair: BroadcastPair, p) -> float:
    return min(mutual_information(p, pair.w1), mutual_information(p, pair.w2))


def _probe_uniqueness(pair, p, value, seed=1, probes=64, step=1e-4):
    rng = np.random.default_rng(seed)
    for _ in range(probes):
        v = rng.standard_normal(p.size)
        v -= v.mean()
        v *= step / np.abs(v).max()
        q = p + v
        if np.any(q < 0):
            continue
        if maximin_value(pair, q / q.sum()) >= value:
            return False
    return True


def solve_caid(pair: BroadcastPair, tol: float = 1e-9, condition_tolerance: float = 1e-9,
               max_iter: int = 200_000) -> ChannelAnalysis:
    """Maximin input distribution argmax_P min_k I_k(P) with derived constants.

    The value is certified by the bound
    C <= max_x sum_k lam_k D(W_k(.|x) || P W_k) for any weight lam in [0, 1].
    """
    w1, w2 = pair.w1.w, pair.w2.w
    n = pair.num_inputs
    uniform = np.full(n, 1.0 / n)
    inner_tol = min(tol, 1e-12) * 0.1
    p1, _, c1 = _weighted_ba([w1], [1.0], uniform, inner_tol, max_iter)
    p2, _, c2 = _weighted_ba([w2], [1.0], uniform, inner_tol, max_iter)
    c1 = mutual_information(p1, w1)
    c2 = mutual_information(p2, w2)
    iterations = 0

    if mutual_information(p1, w2) >= c1:
        p, lam = p1, 1.0
    elif mutual_information(p2, w1) >= c2:
        p, lam = p2, 0.0
    else:
        lo, hi = 0.0, 1.0
        p, lam = uniform, 0.5
        # coarse bisection on the dual weight, then Newton on the stationarity
        # system; fall back to fine bisection when P* sits on the boundary
        for inner, width in ((1e-7, 1e-2), (1e-9, 1e-4), (inner_tol, 1e-13)):
            while hi - lo > width:
                iterations += 1
                lam = 0.5 * (lo + hi)
                p, _, _ = _weighted_ba([w1, w2], [lam, 1 - lam], p, inner, max_iter)
                g = mutual_information(p, w1) - mutual_information(p, w2)
                if g > 0:
                    hi = lam
                elif g < 0:
                    lo = lam
                else:
                    break
                if _gap(w1, w2, p, lam) < 1e-3 * tol:
                    break
            if _gap(w1, w2, p, lam) < 1e-3 * tol:
                break
            if p.min() > 1e-9:
                polished = _newton_polish(w1, w2, p, lam)
                if polished is not None and _gap(w1, w2, *polished) < 1e-3 * tol:
                    p, lam = polished
                    break

    gap = _gap(w1, w2, p, lam)
    if not gap < tol:
        raise NonConvergence(f"duality gap {gap:.3e} above tolerance {tol:.1e}")
    capacity = maximin_value(pair, p)
    v1 = cond_info_variance(p, w1)
    v2 = cond_info_variance(p, w2)

    report = []
    if p.min() <= 1e-9:
        report.append("P* has a zero entry")
    if v1 <= 1e-15 or v2 <= 1e-15:
        report.append("V_k = 0 for some k")
    if c1 - capacity <= tol or c2 - capacity <= tol:
        report.append("C_k = C for some k")
    try:
        eta = compute_eta(pair, p)
    except DegenerateDerivatives:
        eta = math.nan
        report.append("directional derivatives vanish; eta undefined")
    if not math.isnan(eta) and not (0.0 < eta < 1.0):
        report.append("eta outside (0, 1)")
    v = eta**2 * v1 + (1 - eta) ** 2 * v2
    if math.isnan(eta):
        holds = False
    else:
        per_x = eta**2 * conditional_variances(p, w1) + (1 - eta) ** 2 * conditional_variances(p, w2)
        holds = bool(np.all(np.abs(per_x - v) <= condition_tolerance))

    return ChannelAnalysis(
        p_star=p, capacity_c=capacity, c1=c1, c2=c2, v1=v1, v2=v2, eta=eta,
        v_weighted=v, condition_eq21_holds=holds, condition_tolerance=condition_tolerance,
        p1_star=p1, p2_star=p2, dual_weight=lam, duality_gap=gap, iterations=iterations,
        assumption_report=tuple(report),
        apparently_unique=_probe_uniqueness(pair, p, capacity),
    )


def weighted_variance_by_input(pair: BroadcastPair, analysis: ChannelAnalysis) -> np.ndarray:
    """Var[eta i_1 + (1-eta) i_2 | X = x] with Y_1, Y_2 independent given x."""
    eta = analysis.eta
    return (eta**2 * conditional_variances(analysis.p_star, pair.w1)
            + (1 - eta) ** 2 * conditional_variances(analysis.p_star, pair.w2))
