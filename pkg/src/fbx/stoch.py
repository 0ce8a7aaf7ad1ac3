"""Shared stochastic machinery.

Lattice pmfs with exact log-domain convolution, a few special functions,
seeded random streams, confidence bounds, and the drift-switching
stabilization walk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .errors import LatticeFailure, OutOfRange, SpecViolation, SupportOverflow

MAX_SUPPORT = 2**22
_CONV_CHUNK_CELLS = 2**22


# ---------------------------------------------------------------------------
# special functions

def q_tail(x):
    """Gaussian upper tail Q(x) = P[N(0,1) > x]."""
    return 0.5 * special.erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


def q_inv(p: float) -> float:
    """Inverse of q_tail, refined by Newton steps on Q itself."""
    if not (0.0 < p < 1.0):
        raise OutOfRange(f"q_inv needs p in (0,1), got {p}")
    x = -float(special.ndtri(p))
    for _ in range(4):
        err = float(q_tail(x)) - p
        dens = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        if dens == 0.0:
            break
        step = err / dens
        x += step
        if abs(step) < 1e-16 * max(1.0, abs(x)):
            break
    return x


def binary_entropy_nats(p: float) -> float:
    if not (0.0 <= p <= 1.0):
        raise OutOfRange(f"binary entropy needs p in [0,1], got {p}")
    return float(special.entr(p) + special.entr(1.0 - p))


def log_binomial(n: int, k: int) -> float:
    if not (0 <= k <= n):
        raise OutOfRange(f"log_binomial needs 0 <= k <= n, got n={n}, k={k}")
    return float(special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1))


def log_binomial_pmf(n: int, p: float) -> np.ndarray:
    """log P[Bin(n, p) = k] for k = 0..n, with exact zeros at p in {0, 1}."""
    k = np.arange(n + 1)
    logc = special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = logc + special.xlogy(k, p) + special.xlog1py(n - k, -p)
    if p == 0.0:
        out = np.where(k == 0, 0.0, -np.inf)
    elif p == 1.0:
        out = np.where(k == n, 0.0, -np.inf)
    return out


def log_fair_binomial_cdf(n: int) -> np.ndarray:
    """log P[Bin(n, 1/2) <= t] for t = 0..n."""
    return np.logaddexp.accumulate(log_binomial_pmf(n, 0.5))


def logsumexp(a, axis=None):
    with np.errstate(divide="ignore", invalid="ignore"):
        return special.logsumexp(a, axis=axis)


# ---------------------------------------------------------------------------
# lattice pmfs

@dataclass(frozen=True)
class IntPmf:
    """Pmf on the lattice origin + (offset + i) * step, i = 0..len-1.

    Masses are stored as natural logs so that n-fold products of small
    probabilities stay representable.
    """

    offset: int
    log_probs: np.ndarray
    lattice_step: float = 1.0
    origin: float = 0.0
    approximate: bool = False

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=float)
        if lp.ndim != 1 or lp.size == 0:
            raise ValueError("IntPmf needs a non-empty 1-d mass vector")
        if np.any(np.isnan(lp)) or np.any(lp > 1e-12):
            raise ValueError("log masses must be <= 0")
        object.__setattr__(self, "log_probs", lp)

    @classmethod
    def from_probs(cls, probs, offset=0, lattice_step=1.0, origin=0.0):
        probs = np.asarray(probs, dtype=float)
        if np.any(probs < 0):
            raise ValueError("negative probability")
        with np.errstate(divide="ignore"):
            return cls(offset, np.log(probs), lattice_step, origin)

    @classmethod
    def point(cls, value: float = 0.0):
        return cls(0, np.zeros(1), 1.0, float(value))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def values(self) -> np.ndarray:
        idx = self.offset + np.arange(self.log_probs.size)
        return self.origin + idx * self.lattice_step

    def __len__(self):
        return self.log_probs.size

    def total_mass(self) -> float:
        return float(np.exp(logsumexp(self.log_probs)))

    def mean(self) -> float:
        p = self.probs
        return float(np.dot(p, self.values) / p.sum())

    def var(self) -> float:
        p = self.probs / self.probs.sum()
        idx = np.arange(p.size, dtype=float)
        mu = np.dot(p, idx)
        return float(np.dot(p, (idx - mu) ** 2) * self.lattice_step**2)

    def cdf(self, t) -> np.ndarray:
        """P[S <= t] evaluated on an array of thresholds."""
        t = np.asarray(t, dtype=float)
        cum = np.cumsum(self.probs)
        pos = np.floor((t - self.origin) / self.lattice_step + 1e-9) - self.offset
        pos = np.clip(pos, -1, len(self) - 1).astype(np.int64)
        out = np.where(pos >= 0, cum[np.maximum(pos, 0)], 0.0)
        return np.minimum(out, 1.0)

    def trimmed(self) -> "IntPmf":
        """Drop zero-mass entries at both ends."""
        finite = np.flatnonzero(np.isfinite(self.log_probs))
        lo, hi = finite[0], finite[-1]
        return IntPmf(self.offset + int(lo), self.log_probs[lo:hi + 1],
                      self.lattice_step, self.origin, self.approximate)


def _log_convolve(la: np.ndarray, lb: np.ndarray) -> np.ndarray:
    """Exact convolution of two log-mass vectors.

    Each output cell is a log-sum-exp over its anti-diagonal; chunking keeps
    memory bounded while the per-chunk order is fixed.
    """
    if la.size < lb.size:
        la, lb = lb, la
    a, b = la.size, lb.size
    out = np.full(a + b - 1, -np.inf)
    rows = max(1, min(b, _CONV_CHUNK_CELLS // max(a, 1)))
    cols = np.arange(a)
    for j0 in range(0, b, rows):
        blk = lb[j0:j0 + rows]
        c = blk.size
        skew = np.full((c, a + c - 1), -np.inf)
        r = np.arange(c)[:, None]
        skew[r, cols[None, :] + r] = blk[:, None] + la[None, :]
        part = logsumexp(skew, axis=0)
        seg = slice(j0, j0 + a + c - 1)
        with np.errstate(invalid="ignore"):
            out[seg] = np.logaddexp(out[seg], part)
    return out


def convolve(x: IntPmf, y: IntPmf, max_support: int = MAX_SUPPORT) -> IntPmf:
    if not math.isclose(x.lattice_step, y.lattice_step, rel_tol=1e-12):
        if len(x) == 1:
            x = IntPmf(0, x.log_probs, y.lattice_step, x.origin + x.offset * x.lattice_step)
        elif len(y) == 1:
            y = IntPmf(0, y.log_probs, x.lattice_step, y.origin + y.offset * y.lattice_step)
        else:
            raise LatticeFailure("convolving pmfs on different lattices")
    size = len(x) + len(y) - 1
    if size > max_support:
        raise SupportOverflow(f"lattice support {size} exceeds {max_support}")
    lp = _log_convolve(x.log_probs, y.log_probs)
    return IntPmf(x.offset + y.offset, lp, x.lattice_step, x.origin + y.origin,
                  x.approximate or y.approximate)


def lattice_convolve_power(base: IntPmf, n: int, max_support: int = MAX_SUPPORT) -> IntPmf:
    """n-fold self-convolution by binary powering."""
    if n < 1:
        raise OutOfRange("power must be a positive integer")
    if (len(base) - 1) * n + 1 > max_support:
        raise SupportOverflow(f"{n}-fold support would exceed {max_support}")
    base = base.trimmed()
    result = None
    sq = base
    while True:
        if n & 1:
            result = sq if result is None else convolve(result, sq, max_support)
        n >>= 1
        if not n:
            break
        sq = convolve(sq, sq, max_support)
    return result


def snap_to_lattice(values: Sequence[float], tol: float = 1e-9,
                    max_denominator: int = 64, max_span: int = 4096):
    """Find (origin, step, indices) with values ~= origin + indices * step.

    The coarsest step that fits every value within tol is returned. Raises
    LatticeFailure when no step with a bounded span exists.
    """
    v = np.sort(np.unique(np.asarray(values, dtype=float)))
    origin = float(v[0])
    if v.size == 1:
        return origin, 1.0, np.zeros(len(values), dtype=np.int64)
    diffs = v[1:] - origin
    d0 = diffs[0]
    for den in range(1, max_denominator + 1):
        step = d0 / den
        ratio = diffs / step
        k = np.rint(ratio)
        if k[-1] > max_span:
            break
        if np.all(np.abs(ratio - k) * step <= tol):
            # refit the step by least squares so rounding noise does not accumulate
            step = float(np.dot(k, diffs) / np.dot(k, k))
            idx = np.rint((np.asarray(values, dtype=float) - origin) / step).astype(np.int64)
            return origin, step, idx
    raise LatticeFailure("atoms do not share a lattice within tolerance")


def pmf_from_atoms(values, probs, tol: float = 1e-9) -> IntPmf:
    """Place a finite law on the coarsest lattice that fits its atoms."""
    values = np.asarray(values, dtype=float)
    probs = np.asarray(probs, dtype=float)
    origin, step, idx = snap_to_lattice(values, tol)
    mass = np.zeros(int(idx.max()) + 1)
    np.add.at(mass, idx, probs)
    return IntPmf.from_probs(mass, 0, step, origin)


def quantized_pmf(values, probs, bins: int = 2**16, span: float | None = None) -> IntPmf:
    """Fallback: round atoms up onto a uniform grid.

    Rounding up makes every partial sum stochastically larger, so lower-tail
    probabilities are under-estimated. That keeps converse bounds valid.
    """
    values = np.asarray(values, dtype=float)
    probs = np.asarray(probs, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    width = span if span is not None else max(hi - lo, 1e-12)
    step = width / (bins - 1)
    idx = np.ceil((values - lo) / step - 1e-12).astype(np.int64)
    mass = np.zeros(int(idx.max()) + 1)
    np.add.at(mass, idx, probs)
    pmf = IntPmf.from_probs(mass, 0, step, lo)
    return IntPmf(pmf.offset, pmf.log_probs, step, lo, approximate=True)


# ---------------------------------------------------------------------------
# random streams

@dataclass(frozen=True)
class RngStream:
    """Reproducible stream keyed by (master_seed, stream_id)."""

    master_seed: int
    stream_id: int = 0

    def generator(self, *sub: int) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.master_seed) & (2**64 - 1),
                                     spawn_key=(int(self.stream_id),) + tuple(int(s) for s in sub))
        return np.random.Generator(np.random.PCG64(seq))


def chunk_sizes(total: int, chunk: int):
    """Fixed partition of trials into chunks, independent of worker count."""
    out = []
    start = 0
    while start < total:
        out.append((start, min(chunk, total - start)))
        start += chunk
    return out


# ---------------------------------------------------------------------------
# confidence bounds

def cp_upper(k, n, alpha: float):
    """One-sided Clopper-Pearson upper bound with miscoverage alpha."""
    k = np.asarray(k, dtype=float)
    with np.errstate(invalid="ignore"):
        up = stats.beta.ppf(1.0 - alpha, k + 1, n - k)
    return np.where(k >= n, 1.0, up)


def cp_lower(k, n, alpha: float):
    k = np.asarray(k, dtype=float)
    with np.errstate(invalid="ignore"):
        lo = stats.beta.ppf(alpha, k, n - k + 1)
    return np.where(k <= 0, 0.0, lo)


def cp_interval(k: int, n: int, confidence: float = 0.99):
    a = (1.0 - confidence) / 2.0
    return float(cp_lower(k, n, a)), float(cp_upper(k, n, a))


def empirical_bernstein(x: np.ndarray, lo: float, hi: float, confidence: float = 0.99):
    """Two-sided empirical-Bernstein interval for the mean of [lo, hi]-valued samples."""
    x = np.asarray(x, dtype=float)
    n = x.size
    rng_width = hi - lo
    mean = float(x.mean())
    if n < 2:
        return mean, lo, hi
    delta = (1.0 - confidence) / 2.0
    log_term = math.log(2.0 / delta)
    var = float(x.var(ddof=1))
    rad = math.sqrt(2.0 * var * log_term / n) + 7.0 * rng_width * log_term / (3.0 * (n - 1))
    return mean, max(lo, mean - rad), min(hi, mean + rad)


# ---------------------------------------------------------------------------
# stabilization walk

Sampler = Callable[[np.random.Generator, int], np.ndarray]


@dataclass(frozen=True)
class StabilizationSpec:
    mu1: float
    mu2: float
    beta: float
    c: float
    sampler1: Sampler = field(repr=False)
    sampler2: Sampler = field(repr=False)
    label: str = ""

    def required_drift(self) -> float:
        return math.sqrt(math.pi / self.beta) * math.exp(self.c**2 / 4.0)

    def validate(self):
        if not (self.mu1 > 0 > self.mu2):
            raise SpecViolation("need mu1 > 0 > mu2")
        if self.beta <= 0 or self.c < 1:
            raise SpecViolation("need beta > 0 and c >= 1")
        if min(self.mu1, -self.mu2) < self.required_drift():
            raise SpecViolation(
                f"drift {min(self.mu1, -self.mu2):.4g} below {self.required_drift():.4g}")

    def tail_bound(self, v):
        v = np.asarray(v, dtype=float)
        return np.minimum(1.0, 2.0 * np.exp(-self.c * math.sqrt(self.beta) * (v - self.mu1 + self.mu2)))


def truncated_gaussian_sampler(mu: float, sigma: float, half_width: float) -> Sampler:
    """N(mu, sigma^2) conditioned on |X - mu| <= half_width, by rejection."""
    def draw(rng: np.random.Generator, size: int) -> np.ndarray:
        z = rng.standard_normal(size)
        bad = np.flatnonzero(np.abs(z) > half_width / sigma)
        while bad.size:
            z[bad] = rng.standard_normal(bad.size)
            bad = bad[np.abs(z[bad]) > half_width / sigma]
        return mu + sigma * z
    return draw


def truncated_gaussian_spec(mu1: float, mu2: float, sigma: float, c: float = 1.0,
                            truncation: float = 3.0, label: str = "") -> StabilizationSpec:
    """Spec with symmetric truncated-Gaussian increments.

    For truncation a >= 0.675 sigma we have Q(a/sigma) <= 1/4, hence
    P[X >= mu + v] <= Q(v/sigma) / (1 - 2 Q(a/sigma)) <= exp(-v^2 / (2 sigma^2)),
    so beta = 1 / (2 sigma^2) is a certified tail parameter.
    """
    if float(q_tail(truncation)) > 0.25:
        raise SpecViolation("truncation too narrow to certify beta = 1/(2 sigma^2)")
    half = truncation * sigma
    spec = StabilizationSpec(mu1, mu2, 1.0 / (2.0 * sigma**2), c,
                             truncated_gaussian_sampler(mu1, sigma, half),
                             truncated_gaussian_sampler(mu2, sigma, half), label)
    spec.validate()
    return spec


@dataclass
class StabilizationReport:
    ell: int
    trials: int
    v_grid: np.ndarray
    counts: np.ndarray
    empirical: np.ndarray
    upper_ci: np.ndarray
    bound: np.ndarray
    alpha: float

    @property
    def holds(self) -> bool:
        return bool(np.all(self.upper_ci <= self.bound))


def stabilization_paths(spec: StabilizationSpec, ell: int, trials: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Final values Y_ell of `trials` independent walks."""
    y = spec.sampler2(rng, trials)
    buf1 = np.empty(trials)
    for _ in range(ell - 1):
        neg = y < 0
        k = int(neg.sum())
        buf1[:] = 0.0
        if k:
            buf1[neg] = spec.sampler1(rng, k)
        if k < trials:
            buf1[~neg] = spec.sampler2(rng, trials - k)
        y += buf1
    return y


def resolvable_v_grid(spec: StabilizationSpec, trials: int, alpha: float = 1e-3,
                      points: int = 41) -> np.ndarray:
    """v values where the tail bound is at least twice the zero-count CP upper bound.

    Further out even an empty tail cannot be told apart from the bound with
    `trials` samples.
    """
    floor = float(cp_upper(0, trials, alpha))
    scale = spec.c * math.sqrt(spec.beta)
    v_max = spec.mu1 - spec.mu2 + math.log(1.0 / floor) / scale
    return np.linspace(0.0, v_max, points)


def simulate_stabilization(spec: StabilizationSpec, ell: int, trials: int, seed: int,
                           v_grid=None, alpha: float = 1e-3,
                           chunk: int = 200_000) -> StabilizationReport:
    spec.validate()
    if ell < 1 or trials < 1:
        raise OutOfRange("need ell >= 1 and trials >= 1")
    if v_grid is None:
        v_grid = resolvable_v_grid(spec, trials, alpha)
    v_grid = np.asarray(v_grid, dtype=float)
    counts = np.zeros(v_grid.size, dtype=np.int64)
    stream = RngStream(seed, 0x57AB)
    for i, (_, size) in enumerate(chunk_sizes(trials, chunk)):
        y = np.abs(stabilization_paths(spec, ell, size, stream.generator(i)))
        counts += (y[None, :] >= v_grid[:, None]).sum(axis=1)
    return StabilizationReport(ell, trials, v_grid, counts, counts / trials,
                               np.asarray(cp_upper(counts, trials, alpha), dtype=float),
                               spec.tail_bound(v_grid), alpha)
