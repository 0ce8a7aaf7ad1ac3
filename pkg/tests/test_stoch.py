import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbx.errors import OutOfRange, SpecViolation, SupportOverflow
from fbx.stoch import (IntPmf, RngStream, StabilizationSpec, binary_entropy_nats, chunk_sizes,
                       convolve, cp_upper, empirical_bernstein, lattice_convolve_power,
                       log_binomial, log_fair_binomial_cdf, pmf_from_atoms, q_inv, q_tail,
                       quantized_pmf, simulate_stabilization, snap_to_lattice,
                       stabilization_paths, truncated_gaussian_spec)


# frozen reference values (independently tabulated normal tail)
@pytest.mark.parametrize("x, q", [
    (0.0, 0.5),
    (1.0, 0.15865525393145707),
    (2.0, 0.022750131948179195),
    (3.090232306167813, 1.0000000000000002e-3),
    (8.0, 6.22096057427178e-16),
])
def test_q_tail_reference(x, q):
    got = float(q_tail(x))
    assert abs(got - q) < 1e-14
    assert math.isclose(got, q, rel_tol=1e-12)


def test_q_inv_roundtrip():
    for p in (1e-12, 1e-6, 2e-3, 0.1, 0.5, 0.9):
        assert math.isclose(float(q_tail(q_inv(p))), p, rel_tol=1e-12)
    with pytest.raises(OutOfRange):
        q_inv(0.0)


def test_binary_entropy():
    assert binary_entropy_nats(0.5) == pytest.approx(math.log(2), abs=1e-15)
    assert binary_entropy_nats(0.0) == 0.0
    assert binary_entropy_nats(1.0) == 0.0
    with pytest.raises(OutOfRange):
        binary_entropy_nats(1.5)


def test_log_binomial_exact_integer_oracle():
    assert log_binomial(50, 0) == 0.0
    assert abs(log_binomial(50, 25) - math.log(math.comb(50, 25))) < 1e-10
    assert abs(log_binomial(1000, 317) - math.log(math.comb(1000, 317))) < 1e-9


def test_fair_binomial_cdf_against_integer_sums():
    n = 60
    lc = log_fair_binomial_cdf(n)
    for t in (0, 7, 30, 59, 60):
        exact = sum(math.comb(n, k) for k in range(t + 1)) / 2**n
        assert math.isclose(math.exp(lc[t]), exact, rel_tol=1e-12)


def test_power_of_point_mass():
    p = IntPmf.point(1.25)
    r = lattice_convolve_power(p, 7)
    assert len(r) == 1 and r.values[0] == pytest.approx(8.75)


def test_fair_coin_squared():
    coin = IntPmf.from_probs([0.5, 0.5])
    np.testing.assert_allclose(lattice_convolve_power(coin, 2).probs, [0.25, 0.5, 0.25], atol=1e-15)


def test_four_point_law_triple_sum():
    # atoms on a common lattice: 3 values spaced by 0.5 plus one more
    atoms = np.array([-1.0, -0.5, 0.5, 1.5])
    probs = np.array([0.1, 0.2, 0.3, 0.4])
    base = pmf_from_atoms(atoms, probs)
    got = lattice_convolve_power(base, 3)
    brute = {}
    for i, j, k in itertools.product(range(4), repeat=3):
        s = round(atoms[i] + atoms[j] + atoms[k], 9)
        brute[s] = brute.get(s, 0.0) + probs[i] * probs[j] * probs[k]
    gp = got.probs
    for s, pr in brute.items():
        idx = int(round((s - got.origin) / got.lattice_step)) - got.offset
        assert abs(gp[idx] - pr) < 1e-14
    assert abs(gp.sum() - 1) < 1e-12


def test_support_overflow():
    coin = IntPmf.from_probs([0.5, 0.5])
    with pytest.raises(SupportOverflow):
        lattice_convolve_power(coin, 100, max_support=50)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6),
       st.integers(1, 6), st.integers(1, 6))
def test_power_associativity(weights, a, b):
    w = np.array(weights) / sum(weights)
    base = IntPmf.from_probs(w)
    lhs = lattice_convolve_power(base, a + b)
    rhs = convolve(lattice_convolve_power(base, a), lattice_convolve_power(base, b))
    assert len(lhs) == len(rhs)
    assert 0.5 * np.abs(lhs.probs - rhs.probs).sum() < 1e-10
    assert abs(lhs.total_mass() - 1) < 1e-10


def test_log_domain_keeps_tiny_masses():
    base = IntPmf.from_probs([1 - 1e-200, 1e-200])
    r = lattice_convolve_power(base, 4)
    assert r.log_probs[-1] == pytest.approx(4 * math.log(1e-200), rel=1e-12)


def test_snap_to_lattice_detects_common_step():
    origin, step, idx = snap_to_lattice([0.3, 0.3 + 0.7 * 3, 0.3 + 0.7 * 5])
    assert step == pytest.approx(0.7)
    assert list(idx) == [0, 3, 5]


def test_quantized_pmf_rounds_up():
    pmf = quantized_pmf([0.0, 0.33, 1.0], [0.2, 0.3, 0.5], bins=11)
    assert pmf.approximate
    assert pmf.mean() >= 0.2 * 0 + 0.3 * 0.33 + 0.5 - 1e-12


def test_rng_streams_reproducible_and_distinct():
    a = RngStream(11, 1).generator(0).standard_normal(20000)
    b = RngStream(11, 1).generator(0).standard_normal(20000)
    c = RngStream(11, 2).generator(0).standard_normal(20000)
    np.testing.assert_array_equal(a, b)
    assert abs(np.corrcoef(a, c)[0, 1]) < 0.04


def test_chunk_sizes_partition():
    parts = chunk_sizes(10, 4)
    assert parts == [(0, 4), (4, 4), (8, 2)]


def test_cp_upper_zero_count_closed_form():
    for n in (10, 1000):
        assert float(cp_upper(0, n, 1e-3)) == pytest.approx(1 - 1e-3 ** (1 / n), rel=1e-10)


def test_cp_upper_shrinks_with_trials():
    ups = [float(cp_upper(n // 100, n, 1e-3)) for n in (1000, 10000, 100000)]
    assert ups[0] > ups[1] > ups[2] > 0.01


def test_empirical_bernstein_coverage():
    rng = np.random.default_rng(3)
    hits = 0
    for _ in range(200):
        x = rng.uniform(0, 1, 400) ** 2
        _, lo, hi = empirical_bernstein(x, 0.0, 1.0, 0.95)
        hits += lo <= 1 / 3 <= hi
    assert hits >= 190


# stabilization walk

def test_spec_refuses_weak_drift():
    with pytest.raises(SpecViolation):
        truncated_gaussian_spec(0.5, -0.5, 1.0)


def test_first_step_uses_second_sampler():
    spec = truncated_gaussian_spec(4.0, -4.0, 1.0)
    y = stabilization_paths(spec, 1, 50000, np.random.default_rng(0))
    assert y.mean() == pytest.approx(-4.0, abs=0.03)
    assert np.all(np.abs(y + 4.0) <= 3.0 + 1e-12)


def test_deterministic_increments_stay_bounded():
    up = lambda rng, k: np.full(k, 5.0)  # noqa: E731
    down = lambda rng, k: np.full(k, -5.0)  # noqa: E731
    spec = StabilizationSpec(5.0, -5.0, 1.0, 1.0, up, down)
    y = stabilization_paths(spec, 101, 10, np.random.default_rng(0))
    assert np.all(np.abs(y) <= 5.0)


def test_tail_bound_small_run():
    spec = truncated_gaussian_spec(3.5, -3.5, 1.0)
    rep = simulate_stabilization(spec, 200, 20000, seed=5)
    assert rep.holds
    assert rep.empirical[0] == 1.0
