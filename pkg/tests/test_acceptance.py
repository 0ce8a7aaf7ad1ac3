"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest
from conftest import h2, record_acceptance

from fbx.antisym import certify_antisymmetric, make_antisym_z, make_parallel_bsc, sum_density_variance
from fbx.channel import BroadcastPair, Dmc, compute_eta, solve_caid
from fbx.cli import main
from fbx.curves import check_ordering, comparison_curves
from fbx.rcu import coupled_pmf, rcu_epsilon, rcu_max_logM
from fbx.stoch import log_fair_binomial_cdf, simulate_stabilization, truncated_gaussian_spec
from fbx.vlf import best_point, default_vlf_params, simulate_vlf, vlf_converse_logM

pytestmark = pytest.mark.slow
LOG2 = math.log(2.0)
Q1, Q2 = 0.05, 0.10


def test_capacity_of_parallel_bsc():
    t0 = time.perf_counter()
    an = solve_caid(make_parallel_bsc(Q1, Q2))
    elapsed = time.perf_counter() - t0
    c_bits = an.capacity_c / LOG2
    closed = 1 - 0.5 * (h2(Q1) + h2(Q2))
    uni = float(np.max(np.abs(an.p_star - 0.25)))
    ok = abs(c_bits - closed) < 1e-9 and abs(c_bits - 0.622) < 1e-3 and uni < 1e-6 and elapsed < 1
    record_acceptance(1, ok, f"C = {c_bits:.6f} bits (closed form {closed:.6f}), "
                             f"max |P*-1/4| = {uni:.1e}, {elapsed:.2f} s")
    assert ok


def test_mismatched_decoding_ceiling():
    t0 = time.perf_counter()
    rate = rcu_max_logM(4000, 1e-3, Q1, Q2) / (4000 * LOG2)
    elapsed = time.perf_counter() - t0
    trend = [rcu_max_logM(n, 1e-3, Q1, Q2) / (n * LOG2) for n in (1000, 4000, 10000)]
    ceiling = 1 - h2(0.075)
    increasing = trend[0] < trend[1] < trend[2] < ceiling
    ok = 0.59 <= rate <= 0.616 and increasing and elapsed < 120
    record_acceptance(2, ok, f"RCU rate at n=4000 = {rate:.4f} bits (window [0.59, 0.616]); "
                             f"n=1e3/4e3/1e4 rates {trend[0]:.4f}/{trend[1]:.4f}/{trend[2]:.4f} "
                             f"rising toward {ceiling:.4f}; {elapsed:.2f} s")
    assert ok


def _antisym_instances():
    rng = np.random.default_rng(21)
    pairs = [make_parallel_bsc(Q1, Q2)]
    pairs += [make_parallel_bsc(*sorted(rng.uniform(0.01, 0.45, 2))) for _ in range(6)]
    pairs += [make_antisym_z(q) for q in (0.1, 0.3, 0.6)]
    return pairs


def test_eta_half_and_dispersion_halving():
    worst_eta = worst_v = worst_var = 0.0
    certified = 0
    for pair in _antisym_instances():
        an = solve_caid(pair)
        rep = certify_antisymmetric(pair, an)
        if rep.refused:
            continue
        certified += 1
        eta = compute_eta(pair, an.p_star)
        worst_eta = max(worst_eta, abs(eta - 0.5))
        worst_v = max(worst_v, abs(an.v_weighted - an.v1 / 2))
        var = sum_density_variance(pair, an.p_star)
        worst_var = max(worst_var, float(np.max(np.abs(var - 2 * an.v1))))
    ok = certified >= 8 and worst_eta <= 1e-8 and worst_v <= 1e-12 and worst_var <= 1e-9
    record_acceptance(3, ok, f"{certified} certified instances; max |eta-1/2| = {worst_eta:.1e}, "
                             f"max |V-V1/2| = {worst_v:.1e}, max per-input variance error "
                             f"{worst_var:.1e}")
    assert ok


def test_three_curve_ordering():
    t0 = time.perf_counter()
    grid = list(range(200, 2001, 200))
    curves = comparison_curves(Q1, Q2, 1e-3, grid)
    try:
        check_ordering(curves)
        ordered = True
    except Exception:
        ordered = False
    gaps = [(c.n, (c.logM_nats - nrm.logM_nats) / (c.n * LOG2))
            for c, nrm in zip(curves["converse"].points, curves["normal-approx"].points)]
    worst = max(g for n, g in gaps if n >= 1000)
    elapsed = time.perf_counter() - t0
    ok = ordered and worst <= 0.05 and elapsed < 600
    record_acceptance(4, ok, f"ordering rcu <= normal <= converse on n=200..2000: {ordered}; "
                             f"max (converse-normal)/n for n >= 1000 = {worst:.4f} bits; "
                             f"{elapsed:.1f} s")
    assert ok


def simulate_construction(n, trials, seed, chunk=1_000_000):
    """Literal run of the balancing construction on the parallel-BSC pair.

    A uniform bit c_i picks the symbol within a half; the half is B_i = 0
    (decoder 1 sees BSC(q1)) when decoder 1 has more errors so far, B_i = 1
    when decoder 2 has, and a fair coin on ties. Outputs are drawn from the
    channel matrices; the returned values are the Hamming distances between
    the codeword bits and decoder 1's outputs.
    """
    pair = make_parallel_bsc(Q1, Q2)
    p1 = pair.w1.w[:, 1]
    p2 = pair.w2.w[:, 1]
    rng = np.random.default_rng(seed)
    out = []
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        d1 = np.zeros(size, dtype=np.int64)
        d2 = np.zeros(size, dtype=np.int64)
        for _ in range(n):
            c = rng.integers(0, 2, size)
            coin = rng.integers(0, 2, size)
            b = np.where(d1 > d2, 0, np.where(d2 > d1, 1, coin))
            x = c + 2 * b
            y1 = (rng.random(size) < p1[x]).astype(np.int64)
            y2 = (rng.random(size) < p2[x]).astype(np.int64)
            d1 += y1 != c
            d2 += y2 != c
        out.append(d1)
        done += size
    return np.concatenate(out)


def test_rcu_oracles():
    trials = 10_000_000
    z = simulate_construction(20, trials, seed=5)
    emp = np.bincount(z, minlength=21) / trials
    exact = np.zeros(21)
    probs = coupled_pmf(20, Q1, Q2).probs
    exact[: probs.size] = probs
    se = np.sqrt(exact * (1 - exact) / trials)
    zscore = np.zeros(21)
    live = se > 0
    zscore[live] = np.abs(emp - exact)[live] / se[live]
    zscore[~live & (emp > 0)] = np.inf
    bins_ok = bool(np.all(zscore <= 3))

    # n = 200, M = 2^100: Monte Carlo of the union term along literal runs
    n, log_m1 = 200, 100 * LOG2 + math.log1p(-2.0**-100)
    z200 = simulate_construction(n, 1_000_000, seed=6)
    log_cdf = log_fair_binomial_cdf(n)
    terms = np.minimum(1.0, np.exp(np.minimum(log_m1 + log_cdf[z200], 0.0)))
    mc, mc_se = terms.mean(), terms.std(ddof=1) / math.sqrt(terms.size)
    exact_eps = rcu_epsilon(n, 2**100, Q1, Q2)
    eps_ok = abs(mc - exact_eps) <= 3 * mc_se
    ok = bins_ok and eps_ok
    record_acceptance(5, ok, f"n=20 pmf vs 1e7 runs: max |z| = {float(np.max(zscore)):.2f}; "
                             f"n=200, M=2^100: exact {exact_eps:.4e} vs MC {mc:.4e} "
                             f"+- {mc_se:.1e} (|z| = {abs(mc - exact_eps) / mc_se:.2f})")
    assert ok


def test_vlf_sandwich():
    t0 = time.perf_counter()
    pair = make_parallel_bsc(Q1, Q2)
    an = solve_caid(pair)
    eps = 0.05
    rows = []
    for ell_bar in (1000, 2000, 5000):
        prm = default_vlf_params(ell_bar, eps, an, pair)
        stats = simulate_vlf(prm, pair, 100_000, seed=ell_bar)
        pt = best_point(prm, pair, stats, eps)
        conv = vlf_converse_logM(pt.ell, pt.eps_certified, an.capacity_c)
        gap = 1 - pt.logM * (1 - eps) / (pt.ell * an.capacity_c)
        rows.append((ell_bar, pt.logM, conv, gap, pt.eps_certified))
    below = all(lm <= cv for _, lm, cv, _, _ in rows)
    gaps = [g for *_, g, _ in rows]
    decreasing = all(a > b for a, b in zip(gaps, gaps[1:]))
    certified = all(e <= eps + 1e-12 for *_, e in rows)
    elapsed = time.perf_counter() - t0
    ok = below and decreasing and certified and elapsed < 1800
    detail = "; ".join(f"ell_bar={e}: logM={lm:.1f} <= {cv:.1f}, gap {g:.4f}"
                       for e, lm, cv, g, _ in rows)
    record_acceptance(6, ok, f"{detail}; {elapsed:.0f} s")
    assert ok


def test_stabilization_tails():
    t0 = time.perf_counter()
    specs = [truncated_gaussian_spec(3.5, -3.5, 1.0), truncated_gaussian_spec(4.0, -4.0, 1.0),
             truncated_gaussian_spec(7.0, -7.0, 2.0)]
    parts = []
    ok = True
    for i, spec in enumerate(specs):
        rep = simulate_stabilization(spec, 10_000, 100_000, seed=i)
        ok &= rep.holds
        live = rep.bound < 1.0
        ratio = float(np.max(rep.upper_ci[live] / rep.bound[live]))
        parts.append(f"({spec.mu1}, {spec.mu2}, beta={spec.beta:.3f}) max upper/bound "
                     f"{ratio:.3f} over {int(live.sum())} informative v")
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 300
    record_acceptance(7, ok, "; ".join(parts) + f"; {elapsed:.0f} s")
    assert ok


def _maximin_on(points, w1, w2):
    def mi(w):
        q = points @ w
        hyx = -(points @ np.sum(np.where(w > 0, w * np.log(np.where(w > 0, w, 1)), 0), axis=1))
        hy = -np.sum(np.where(q > 0, q * np.log(np.where(q > 0, q, 1)), 0), axis=1)
        return hy - hyx
    return np.minimum(mi(w1), mi(w2))


def _simplex_grid(step):
    k = int(round(1 / step))
    a, b = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    keep = a + b <= k
    a, b = a[keep], b[keep]
    return np.stack([a, b, k - a - b], axis=1) / k


def _zoom(w1, w2, center, half, steps=1000):
    u = np.linspace(-half, half, steps)
    a, b = np.meshgrid(u, u, indexing="ij")
    pts = np.stack([center[0] + a.ravel(), center[1] + b.ravel()], axis=1)
    pts = np.column_stack([pts, 1 - pts.sum(axis=1)])
    pts = pts[np.all(pts >= 0, axis=1)]
    vals = _maximin_on(pts, w1, w2)
    j = int(np.argmax(vals))
    return float(vals[j]), pts[j]


def test_solver_against_grid():
    rng = np.random.default_rng(3)
    coarse = _simplex_grid(1e-3)
    worst = worst_plain = 0.0
    below_plain = False
    for _ in range(20):
        w1, w2 = rng.dirichlet(np.ones(3), 3), rng.dirichlet(np.ones(3), 3)
        an = solve_caid(BroadcastPair(Dmc(w1), Dmc(w2)))
        vals = _maximin_on(coarse, w1, w2)
        j = int(np.argmax(vals))
        plain, best, pt = float(vals[j]), float(vals[j]), coarse[j]
        for half in (2e-3, 2e-5, 2e-7):
            v, p = _zoom(w1, w2, pt, half)
            if v > best:
                best, pt = v, p
        worst = max(worst, abs(an.capacity_c - best))
        worst_plain = max(worst_plain, abs(an.capacity_c - plain))
        below_plain |= an.capacity_c < plain - 1e-12
    ok = worst <= 1e-5 and not below_plain
    record_acceptance(8, ok, f"20 random 3x3 pairs: max |solver - refined grid| = {worst:.2e} "
                             f"nats; max |solver - plain 1e-3 grid| = {worst_plain:.2e}; "
                             f"solver never below the plain grid: {not below_plain}")
    assert ok


def _artifacts(root, seed):
    root.mkdir()
    ch = root / "ch.json"
    cmds = [
        ["channel", "make", "--kind", "parallel-bsc", "--q1", "0.05", "--q2", "0.1",
         "--out", str(ch)],
        ["channel", "analyze", str(ch), "--out", str(root / "analysis.json")],
        ["channel", "certify", str(ch), "--out", str(root / "certify.json")],
        ["bound", "converse", "--channel", str(ch), "--eps", "1e-3", "--n-grid", "100:500:200",
         "--out", str(root / "converse.csv")],
        ["bound", "rcu", "--channel", str(ch), "--eps", "1e-3", "--n-grid", "100:500:200",
         "--out", str(root / "rcu.json"), "--bits"],
        ["bound", "normal", "--channel", str(ch), "--eps", "1e-3", "--n-grid", "100:500:200",
         "--out", str(root / "normal.csv")],
        ["bound", "vlf-converse", "--channel", str(ch), "--eps", "0.05", "--ell-grid",
         "1000,2000", "--out", str(root / "vlfc.json")],
        ["sim", "flf", "--channel", str(ch), "--n", "8000", "--eps", "0.01", "--trials", "10000",
         "--n-b", "kappa", "--out", str(root / "flf.json")],
        ["sim", "vlf", "--channel", str(ch), "--ellbar", "1000", "--eps", "0.05", "--trials",
         "5000", "--out", str(root / "vlf.json")],
        ["fig4", "--n-grid", "200:1000:400", "--out-dir", str(root / "fig4"), "--threads", "2"],
    ]
    for cmd in cmds:
        extra = ["--seed", str(seed)] if cmd[0] in ("bound", "sim", "fig4") else []
        assert main(cmd + extra) == 0, cmd
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_determinism(tmp_path):
    a = _artifacts(tmp_path / "a", 11)
    b = _artifacts(tmp_path / "b", 11)
    diff = sorted(k for k in a if a[k] != b.get(k))
    ok = set(a) == set(b) and not diff and len(a) >= 12
    record_acceptance(9, ok, f"{len(a)} artifacts compared byte for byte; differing: {diff or 'none'}")
    assert ok
