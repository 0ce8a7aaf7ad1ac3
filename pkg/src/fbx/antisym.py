"""Antisymmetric broadcast pairs.

A pair is antisymmetric when swapping the two halves of the input alphabet
turns W1 into W2, and each output group splits into weakly symmetric
sub-blocks. Such pairs have a uniform maximin input, eta = 1/2 and half the
single-user dispersion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import BroadcastPair, ChannelAnalysis, Dmc, density_table
from .errors import OutOfRange

EXACT_TOL = 1e-12


@dataclass(frozen=True)
class NotAntisymmetric:
    reason: str

    def __bool__(self):
        return False


@dataclass(frozen=True)
class AntisymDecomposition:
    half: int
    output_partition: tuple
    p_matrix: np.ndarray
    sub_blocks: tuple  # sub_blocks[k][i] is the block for half k, group i

    def reassemble(self):
        """Rebuild (w1, w2) from the decomposition."""
        num_outputs = sum(len(g) for g in self.output_partition)
        top = np.zeros((self.half, num_outputs))
        bottom = np.zeros((self.half, num_outputs))
        for i, group in enumerate(self.output_partition):
            top[:, list(group)] = self.p_matrix[0, i] * self.sub_blocks[0][i]
            bottom[:, list(group)] = self.p_matrix[1, i] * self.sub_blocks[1][i]
        w1 = np.vstack([top, bottom])
        w2 = np.vstack([bottom, top])
        return w1, w2


def half_swap(num_inputs: int) -> np.ndarray:
    """Permutation pi mapping x to x + |X|/2 modulo |X|."""
    half = num_inputs // 2
    return np.concatenate([np.arange(half, num_inputs), np.arange(half)])


def is_weakly_symmetric(block: np.ndarray, tol: float = EXACT_TOL) -> bool:
    rows = np.sort(block, axis=1)
    if np.any(np.abs(rows - rows[0]) > tol):
        return False
    cols = block.sum(axis=0)
    return bool(np.all(np.abs(cols - cols[0]) <= tol * block.shape[0]))


def _column_key(col_top, col_bottom):
    return (tuple(np.round(np.sort(col_top), 12)), tuple(np.round(np.sort(col_bottom), 12)))


def _valid_partition(top, bottom, groups):
    for g in groups:
        idx = list(g)
        for blk in (top[:, idx], bottom[:, idx]):
            mass = blk.sum(axis=1)
            if np.any(np.abs(mass - mass[0]) > EXACT_TOL):
                return False
            if mass[0] > 0 and not is_weakly_symmetric(blk / mass[0]):
                return False
    return True


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def _find_partition(top, bottom):
    num_outputs = top.shape[1]
    groups = {}
    for y in range(num_outputs):
        groups.setdefault(_column_key(top[:, y], bottom[:, y]), []).append(y)
    candidate = sorted(groups.values())
    if _valid_partition(top, bottom, candidate):
        return candidate
    if num_outputs > 8:
        return None
    # finest valid partition by exhaustive search over set partitions
    best = None
    for part in _set_partitions(list(range(num_outputs))):
        if _valid_partition(top, bottom, part) and (best is None or len(part) > len(best)):
            best = part
    return None if best is None else sorted(sorted(g) for g in best)


def check_antisymmetric(pair: BroadcastPair):
    n = pair.num_inputs
    if n % 2:
        return NotAntisymmetric("input alphabet size is odd")
    w1, w2 = pair.w1.w, pair.w2.w
    pi = half_swap(n)
    if np.any(np.abs(w2[pi] - w1) > EXACT_TOL):
        return NotAntisymmetric("W2(y|pi(x)) != W1(y|x) for some (x, y)")
    half = n // 2
    top, bottom = w1[:half], w1[half:]
    partition = _find_partition(top, bottom)
    if partition is None:
        return NotAntisymmetric("no output partition gives weakly symmetric sub-blocks")
    r = len(partition)
    p = np.zeros((2, r))
    blocks = ([], [])
    for i, group in enumerate(partition):
        for k, blk in enumerate((top[:, group], bottom[:, group])):
            mass = float(blk[0].sum())
            p[k, i] = mass
            if mass > 0:
                blocks[k].append(blk / mass)
            else:
                blocks[k].append(np.full(blk.shape, 1.0 / len(group)))
    dec = AntisymDecomposition(half, tuple(tuple(g) for g in partition), p,
                               (tuple(blocks[0]), tuple(blocks[1])))
    r1, r2 = dec.reassemble()
    if np.any(np.abs(r1 - w1) > EXACT_TOL) or np.any(np.abs(r2 - w2) > EXACT_TOL):
        return NotAntisymmetric("decomposition does not reproduce the channel")
    return dec


def _check_prob(name, q):
    if not (0.0 <= q <= 1.0) or math.isnan(q):
        raise OutOfRange(f"{name} must lie in [0, 1], got {q}")


def make_parallel_bsc(q1: float, q2: float) -> BroadcastPair:
    """Four inputs, binary output. Inputs 0-1 reach decoder 1 through BSC(q1),
    inputs 2-3 through BSC(q2); decoder 2 sees the half-swapped channel."""
    _check_prob("q1", q1)
    _check_prob("q2", q2)
    w1 = np.array([[1 - q1, q1], [q1, 1 - q1], [1 - q2, q2], [q2, 1 - q2]])
    return BroadcastPair(Dmc(w1), Dmc(w1[half_swap(4)]))


def make_antisym_z(q: float) -> BroadcastPair:
    """Z-channel pair: W1 = [[1-q, q], [0, 1]] and W2 its row swap."""
    _check_prob("q", q)
    w1 = np.array([[1 - q, q], [0.0, 1.0]])
    return BroadcastPair(Dmc(w1), Dmc(w1[::-1]))


@dataclass
class CertificationReport:
    refused: bool
    reason: str = ""
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.refused and all(ok for ok, _ in self.checks.values())

    def to_dict(self) -> dict:
        return {"refused": self.refused, "reason": self.reason, "passed": self.passed,
                "checks": {k: {"ok": ok, "value": val} for k, (ok, val) in self.checks.items()}}


def certify_antisymmetric(pair: BroadcastPair, analysis: ChannelAnalysis) -> CertificationReport:
    dec = check_antisymmetric(pair)
    if not dec:
        return CertificationReport(True, f"not antisymmetric: {dec.reason}")
    p = analysis.p_star
    eta_err = abs(analysis.eta - 0.5) if not math.isnan(analysis.eta) else math.inf
    var_sum = sum_density_variance(pair, p)
    var_err = float(np.max(np.abs(var_sum - 2.0 * analysis.v1)))
    uni_err = float(np.max(np.abs(p - 1.0 / p.size)))
    checks = {
        "eta_half": (eta_err < 1e-8, eta_err),
        "equal_dispersions": (abs(analysis.v1 - analysis.v2) < 1e-10, abs(analysis.v1 - analysis.v2)),
        "per_input_variance": (var_err < 1e-9, var_err),
        "uniform_caid": (uni_err < 1e-6, uni_err),
    }
    return CertificationReport(False, "", checks)


certify_corollary1 = certify_antisymmetric  # interface name


def sum_density_variance(pair: BroadcastPair, p) -> np.ndarray:
    """Var[i1(x;Y1) + i2(x;Y2) | X = x] by enumeration of output pairs."""
    d1, d2 = density_table(p, pair.w1), density_table(p, pair.w2)
    w1, w2 = pair.w1.w, pair.w2.w
    out = []
    for x in range(pair.num_inputs):
        joint = np.outer(w1[x], w2[x])
        with np.errstate(invalid="ignore"):
            s = np.where(joint > 0, d1[x][:, None] + d2[x][None, :], 0.0)
        m = (joint * s).sum()
        out.append(float((joint * (s - m) ** 2).sum()))
    return np.array(out)
