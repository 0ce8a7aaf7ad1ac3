import math

import numpy as np
import pytest

from fbx.errors import BlocklengthTooSmall, InfeasibleEpsilon, OutOfRange
from fbx.vlf import (StoppingStats, VlfParams, best_point, default_vlf_params, simulate_vlf,
                     simulate_vlf_run, summarize, vlf_achievable_point, vlf_converse_logM)


def test_converse_arithmetic():
    h = -(1e-3 * math.log(1e-3) + 0.999 * math.log(0.999))
    assert vlf_converse_logM(1000, 1e-3, 0.43118) == pytest.approx((431.18 + h) / 0.999, rel=1e-14)
    assert vlf_converse_logM(1000, 1e-3, 0.43118) == pytest.approx(431.62, abs=0.01)
    with pytest.raises(OutOfRange):
        vlf_converse_logM(10, 1.0, 0.4)
    with pytest.raises(OutOfRange):
        vlf_converse_logM(-1, 0.1, 0.4)


def test_layout_at_ten_thousand(bsc_pair, bsc_analysis):
    prm = default_vlf_params(10_000, 1e-3, bsc_analysis, bsc_pair)
    root = 100 * math.log(10_000)
    assert prm.kappa == 2
    assert prm.L == 20  # floor(cbrt(9078))
    assert prm.m == math.floor((10_000 - root) / prm.L)
    assert prm.tau_max == math.floor(10_000 + root)
    assert prm.n_b == prm.kappa * prm.L
    c = bsc_analysis.capacity_c
    assert prm.gamma == pytest.approx(c * 1e4 - 2 * 1e4 ** (1 / 3) * math.log(1e4), rel=1e-14)
    assert prm.log_m_codewords == pytest.approx(prm.gamma - math.log(1e4), abs=1e-9)
    assert prm.log_m_codewords <= prm.gamma - math.log(1e4)


def test_tiny_ell_bar(bsc_pair, bsc_analysis):
    with pytest.raises(BlocklengthTooSmall):
        default_vlf_params(10, 1e-3, bsc_analysis, bsc_pair)


def test_tilted_laws_valid(bsc_pair, bsc_analysis):
    prm = default_vlf_params(1000, 1e-2, bsc_analysis, bsc_pair)
    assert np.all(prm.types >= 0.5 * prm.p_star - 1e-12)
    np.testing.assert_allclose(prm.types.sum(axis=1), 1.0)
    assert 0 < prm.rho <= 1


def manual(prm, **kw):
    return VlfParams(**{**prm.__dict__, **kw})


def test_zero_threshold_stops_after_first_phase(bsc_pair, bsc_analysis):
    prm = manual(default_vlf_params(1000, 1e-2, bsc_analysis, bsc_pair), gamma=0.0)
    run = simulate_vlf_run(prm, bsc_pair, 500, seed=0)
    # densities after phase one can be negative, so some walks still need steps
    assert np.all(run.tau1 >= prm.first_phase)
    prm_neg = manual(prm, gamma=-1e9)
    run = simulate_vlf_run(prm_neg, bsc_pair, 500, seed=0)
    assert np.all(run.tau1 == prm.first_phase) and np.all(run.tau2 == prm.first_phase)


def test_unreachable_threshold_hits_cap(bsc_pair, bsc_analysis):
    base = default_vlf_params(1000, 1e-2, bsc_analysis, bsc_pair)
    prm = manual(base, gamma=1e9, tau_max=base.first_phase + 1)
    run = simulate_vlf_run(prm, bsc_pair, 300, seed=0)
    assert np.all(run.tau1 == prm.tau_max)
    stats = summarize(prm, run)
    assert stats.p_tau_max_any[0] == 1.0


def test_tau_max_must_exceed_first_phase(bsc_pair, bsc_analysis):
    base = default_vlf_params(1000, 1e-2, bsc_analysis, bsc_pair)
    with pytest.raises(OutOfRange):
        manual(base, tau_max=base.first_phase)


@pytest.fixture(scope="module")
def runs_2000(bsc_pair, bsc_analysis):
    prm = default_vlf_params(2000, 0.05, bsc_analysis, bsc_pair)
    bal = simulate_vlf_run(prm, bsc_pair, 10000, seed=1)
    abl = simulate_vlf_run(prm, bsc_pair, 10000, seed=1, balancing=False)
    return prm, bal, abl


def test_stopping_times_in_range(runs_2000):
    prm, bal, _ = runs_2000
    for tau in (bal.tau1, bal.tau2):
        assert tau.min() >= prm.first_phase and tau.max() <= prm.tau_max


def test_threshold_crossing_is_first(runs_2000, bsc_analysis):
    prm, bal, _ = runs_2000
    mean_tau = 0.5 * (bal.tau1.mean() + bal.tau2.mean())
    # gamma / C < L m here, so most walks stop right when the first phase ends
    assert prm.gamma / bsc_analysis.capacity_c < prm.first_phase
    assert prm.first_phase <= mean_tau <= prm.first_phase + 5
    late = np.mean(np.maximum(bal.tau1, bal.tau2) > prm.first_phase)
    assert late < 0.5


def test_balancing_shrinks_sync_gap(runs_2000):
    _, bal, abl = runs_2000
    assert np.quantile(bal.gap_at_phase_end, 0.99) < np.quantile(abl.gap_at_phase_end, 0.99)
    d_bal = np.maximum(bal.tau1, bal.tau2).mean() - np.minimum(bal.tau1, bal.tau2).mean()
    d_abl = np.maximum(abl.tau1, abl.tau2).mean() - np.minimum(abl.tau1, abl.tau2).mean()
    assert d_bal <= math.sqrt(2000)
    assert d_bal <= d_abl


def test_reproducible(bsc_pair, bsc_analysis):
    prm = default_vlf_params(1000, 0.05, bsc_analysis, bsc_pair)
    a = simulate_vlf(prm, bsc_pair, 2000, seed=4)
    b = simulate_vlf(prm, bsc_pair, 2000, seed=4)
    assert a == b


def test_calibration_meets_epsilon(runs_2000, bsc_pair):
    prm, bal, _ = runs_2000
    stats = summarize(prm, bal)
    pt = vlf_achievable_point(prm, bsc_pair, stats, 0.05, epsilon_star=1e-3)
    assert pt.eps_certified == pytest.approx(0.05, abs=1e-14)
    x = sum(pt.error_terms.values())
    assert pt.q == pytest.approx((0.05 - x) / (1 - x))
    assert pt.ell == pytest.approx((1 - pt.q) * (stats.e_max_tau[2] + pt.n_b))


def test_achievable_below_converse(runs_2000, bsc_pair, bsc_analysis):
    prm, bal, _ = runs_2000
    pt = best_point(prm, bsc_pair, summarize(prm, bal), 0.05)
    assert pt.logM <= vlf_converse_logM(pt.ell, 0.05, bsc_analysis.capacity_c)
    assert pt.n_b >= prm.n_b


def test_infeasible_epsilon(runs_2000, bsc_pair):
    prm, bal, _ = runs_2000
    with pytest.raises(InfeasibleEpsilon):
        vlf_achievable_point(prm, bsc_pair, summarize(prm, bal), 1e-3, epsilon_star=0.01)


def test_coupled_mode_requires_coupled_run(runs_2000, bsc_pair):
    prm, bal, _ = runs_2000
    with pytest.raises(OutOfRange):
        vlf_achievable_point(prm, bsc_pair, summarize(prm, bal), 0.05, mode="coupled")


def test_stats_roundtrip(runs_2000):
    prm, bal, _ = runs_2000
    d = summarize(prm, bal).to_dict()
    assert d["trials"] == 10000
    assert isinstance(StoppingStats(**{**summarize(prm, bal).__dict__}), StoppingStats)


def test_first_crossing_deterministic_steps():
    from fbx.vlf import _first_crossing
    rng = np.random.default_rng(0)
    start = np.array([[0.0, 2.0], [7.0, -100.0]])
    incr = np.array([[1.0, 1.0]])  # one joint outcome, +1 for both walks
    first = _first_crossing(rng, start, 5.0, 50, np.array([1.0]), incr, step_chunk=3)
    np.testing.assert_array_equal(first, [[5, 3], [0, 50]])
