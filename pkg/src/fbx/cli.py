"""fbx command-line interface."""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .antisym import certify_antisymmetric, make_antisym_z, make_parallel_bsc
from .channel import (BroadcastPair, Dmc, load_pair, pair_digest, pair_to_json, save_pair,
                      solve_caid)
from .curves import (BoundCurve, CurvePoint, curve_to_csv, curve_to_json, dumps, emit, parse_grid,
                     run_fig4)
from .errors import FbxError, IoError, OutOfRange
from .flf_bounds import ConverseQuery, converse_point, increment_law, normal_approx_feedback
from .flf_sim import certify_from_batch, default_params, simulate_batch
from .rcu import parallel_bsc_parameters, rcu_point
from .vlf import (best_point, default_vlf_params, simulate_vlf, vlf_achievable_point,
                  vlf_converse_logM)

DEFAULT_SEED = 0


def resolve_seed(flag):
    if flag is not None:
        return int(flag)
    env = os.environ.get("FBX_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise OutOfRange(f"FBX_SEED must be an integer, got {env!r}") from exc
    return DEFAULT_SEED


def resolve_threads(flag):
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get("FBX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise OutOfRange(f"FBX_THREADS must be an integer, got {env!r}") from exc
    return 1


def _mapper(threads):
    """Order-preserving map; output never depends on the worker count."""
    if threads <= 1:
        return lambda fn, xs: [fn(x) for x in xs]

    def run(fn, xs):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, xs))
    return run


def _write_text(text, path):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _format_for(path, fmt):
    if fmt:
        return fmt
    return "json" if path and path.endswith(".json") else "csv"


def _emit_curve(curve, args):
    fmt = _format_for(args.out, args.format)
    if args.out is None or args.out == "-":
        text = curve_to_json(curve, args.bits) if fmt == "json" else curve_to_csv(curve, args.bits)
        sys.stdout.write(text)
    else:
        emit(curve, fmt, args.out, args.bits)


# ---------------------------------------------------------------------------
# channel

def cmd_channel_make(args):
    if args.kind == "parallel-bsc":
        pair = make_parallel_bsc(args.q1, args.q2)
    elif args.kind == "antisym-z":
        pair = make_antisym_z(args.q)
    else:
        try:
            w1 = np.array(json.loads(args.w1), dtype=float)
            w2 = np.array(json.loads(args.w2), dtype=float)
        except (TypeError, ValueError) as exc:
            raise OutOfRange(f"--w1/--w2 must be JSON matrices: {exc}") from exc
        pair = BroadcastPair(Dmc(w1), Dmc(w2))
    if args.out:
        save_pair(pair, args.out)
    else:
        sys.stdout.write(pair_to_json(pair))
    return 0


def cmd_channel_analyze(args):
    pair = load_pair(args.channel)
    an = solve_caid(pair)
    d = {"analysis": an.to_dict(), "channel_digest": pair_digest(pair), "version": __version__,
         "capacity_bits": an.capacity_c / math.log(2.0)}
    _write_text(dumps(d), args.out)
    return 0


def cmd_channel_certify(args):
    pair = load_pair(args.channel)
    an = solve_caid(pair)
    rep = certify_antisymmetric(pair, an)
    d = {"report": rep.to_dict(), "channel_digest": pair_digest(pair), "version": __version__}
    _write_text(dumps(d), args.out)
    if rep.refused:
        return 2
    return 0 if rep.passed else 3


# ---------------------------------------------------------------------------
# bounds

def cmd_bound_converse(args):
    pair = load_pair(args.channel)
    an = solve_caid(pair)
    law = increment_law(an, pair)
    rule = args.lambda_rule
    try:
        rule = float(rule)
    except ValueError:
        pass

    def point(n):
        r = converse_point(pair, an, ConverseQuery(n, args.eps, rule), law)
        return CurvePoint(n, r.logM, "converse", {"lambda": r.lambda_used,
                                                   "approximate": int(r.approximate)})
    pts = _mapper(args.threads)(point, parse_grid(args.n_grid))
    curve = BoundCurve(pts, pair_digest(pair), args.seed, args.eps,
                       {"lambda_rule": str(args.lambda_rule),
                        "assumption": "input-invariant weighted density law"})
    _emit_curve(curve, args)
    return 0


def _rcu_pair(args):
    if args.channel:
        pair = load_pair(args.channel)
        q1, q2 = parallel_bsc_parameters(pair)
        return pair, q1, q2
    if args.q1 is None or args.q2 is None:
        raise OutOfRange("give --channel or both --q1 and --q2")
    return make_parallel_bsc(args.q1, args.q2), args.q1, args.q2


def cmd_bound_rcu(args):
    pair, q1, q2 = _rcu_pair(args)
    band = None if args.exact else "default"

    def point(n):
        r = rcu_point(n, args.eps, q1, q2, band)
        return CurvePoint(n, r.logM, "rcu", {"epsilon_achieved": r.epsilon_achieved,
                                             "truncation_mass": r.truncation_mass})
    pts = _mapper(args.threads)(point, parse_grid(args.n_grid))
    curve = BoundCurve(pts, pair_digest(pair), args.seed, args.eps,
                       {"q1": q1, "q2": q2, "exact": bool(args.exact)})
    _emit_curve(curve, args)
    return 0


def cmd_bound_normal(args):
    pair = load_pair(args.channel)
    an = solve_caid(pair)
    pts = [CurvePoint(n, normal_approx_feedback(an, n, args.eps), "normal-approx")
           for n in parse_grid(args.n_grid)]
    curve = BoundCurve(pts, pair_digest(pair), args.seed, args.eps,
                       {"dispersion_nats2": an.v_weighted})
    _emit_curve(curve, args)
    return 0


def cmd_bound_vlf_converse(args):
    pair = load_pair(args.channel)
    an = solve_caid(pair)
    pts = [CurvePoint(ell, vlf_converse_logM(ell, args.eps, an.capacity_c), "vlf-converse")
           for ell in parse_grid(args.ell_grid)]
    curve = BoundCurve(pts, pair_digest(pair), args.seed, args.eps, {})
    _emit_curve(curve, args)
    return 0


# ---------------------------------------------------------------------------
# simulations

def _n_b_rule(text):
    if text in ("auto", "kappa"):
        return text
    try:
        return int(text)
    except ValueError as exc:
        raise OutOfRange(f"--n-b must be auto, kappa or an integer, got {text!r}") from exc


def cmd_sim_flf(args):
    pair = load_pair(args.channel)
    an = solve_caid(pair)
    params = default_params(args.n, args.eps, an, pair, rho=args.rho,
                            direction_rule=args.direction, n_b_rule=_n_b_rule(args.n_b))
    if args.trials < 10_000:
        raise OutOfRange("need at least 10000 trials")
    batch = simulate_batch(params, pair, args.trials, args.seed)
    point = certify_from_batch(params, pair, batch, args.eps, args.eps_star)
    d = {"kind": "flf-sim", "params": params.to_dict(), "point": point.to_dict(),
         "rate_bits_per_use": point.logM / (point.n_total * math.log(2.0)),
         "channel_digest": pair_digest(pair), "seed": args.seed, "version": __version__,
         "trials": args.trials, "confidence_alpha": 1e-3}
    _write_text(dumps(d), args.out)
    return 0


def cmd_sim_vlf(args):
    pair = load_pair(args.channel)
    an = solve_caid(pair)
    params = default_vlf_params(args.ellbar, args.eps, an, pair, rho=args.rho)
    coupled = args.mode == "coupled"
    stats = simulate_vlf(params, pair, args.trials, args.seed,
                         balancing=not args.no_balancing, coupled=coupled)
    if args.eps_star is not None:
        point = vlf_achievable_point(params, pair, stats, args.eps, args.eps_star,
                                     mode=args.mode)
        source = "user"
    else:
        point = best_point(params, pair, stats, args.eps, mode=args.mode)
        source = "parallel-bsc rcu"
    d = {"kind": "vlf-sim", "params": params.to_dict(), "stats": stats.to_dict(),
         "point": point.to_dict(), "eps_star_source": source,
         "converse_at_point": vlf_converse_logM(point.ell, point.eps_certified, an.capacity_c)
         if point.eps_certified < 1 else None,
         "channel_digest": pair_digest(pair), "seed": args.seed, "version": __version__,
         "trials": args.trials, "balancing": not args.no_balancing,
         "note": "q and M calibrated from measured confidence bounds"}
    _write_text(dumps(d), args.out)
    return 0


def cmd_fig4(args):
    grid = parse_grid(args.n_grid)
    curves = run_fig4(args.q1, args.q2, args.eps, grid, args.out_dir, args.seed, args.bits,
                      _mapper(args.threads))
    if args.out_dir is None:
        sys.stdout.write(dumps({name: c.to_dict() for name, c in curves.items()}))
    return 0


# ---------------------------------------------------------------------------

def _common(p, curve=True):
    p.add_argument("--seed", type=int, default=None, help="master seed (env FBX_SEED)")
    p.add_argument("--threads", type=int, default=None, help="workers (env FBX_THREADS)")
    if curve:
        p.add_argument("--out", default=None)
        p.add_argument("--format", choices=("csv", "json"), default=None)
        p.add_argument("--bits", action="store_true", help="report logM in bits")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbx", description="Finite-blocklength bounds for "
                                 "common-message broadcast channels with feedback.")
    ap.add_argument("--version", action="version", version=f"fbx {__version__}")
    sub = ap.add_subparsers(dest="group", required=True)

    ch = sub.add_parser("channel").add_subparsers(dest="action", required=True)
    mk = ch.add_parser("make")
    mk.add_argument("--kind", choices=("parallel-bsc", "antisym-z", "matrix"), required=True)
    mk.add_argument("--q1", type=float)
    mk.add_argument("--q2", type=float)
    mk.add_argument("--q", type=float)
    mk.add_argument("--w1")
    mk.add_argument("--w2")
    mk.add_argument("--out")
    mk.set_defaults(func=cmd_channel_make)
    for name, fn in (("analyze", cmd_channel_analyze), ("certify", cmd_channel_certify)):
        p = ch.add_parser(name)
        p.add_argument("channel")
        p.add_argument("--out")
        p.set_defaults(func=fn)

    bd = sub.add_parser("bound").add_subparsers(dest="action", required=True)
    p = bd.add_parser("converse")
    p.add_argument("--channel", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--n-grid", default="")
    p.add_argument("--lambda-rule", default="log-n")
    _common(p)
    p.set_defaults(func=cmd_bound_converse)

    p = bd.add_parser("rcu")
    p.add_argument("--channel")
    p.add_argument("--q1", type=float)
    p.add_argument("--q2", type=float)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--n-grid", default="")
    p.add_argument("--exact", action="store_true", help="no difference-band truncation")
    _common(p)
    p.set_defaults(func=cmd_bound_rcu)

    p = bd.add_parser("normal")
    p.add_argument("--channel", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--n-grid", default="")
    _common(p)
    p.set_defaults(func=cmd_bound_normal)

    p = bd.add_parser("vlf-converse")
    p.add_argument("--channel", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--ell-grid", default="")
    _common(p)
    p.set_defaults(func=cmd_bound_vlf_converse)

    sm = sub.add_parser("sim").add_subparsers(dest="action", required=True)
    p = sm.add_parser("flf")
    p.add_argument("--channel", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--direction", choices=("gradient", "canonical"), default="gradient")
    p.add_argument("--n-b", default="auto")
    p.add_argument("--eps-star", type=float, default=None)
    p.add_argument("--out")
    _common(p, curve=False)
    p.set_defaults(func=cmd_sim_flf)

    p = sm.add_parser("vlf")
    p.add_argument("--channel", required=True)
    p.add_argument("--ellbar", type=int, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--mode", choices=("remark5", "coupled"), default="remark5")
    p.add_argument("--no-balancing", action="store_true")
    p.add_argument("--eps-star", type=float, default=None)
    p.add_argument("--out")
    _common(p, curve=False)
    p.set_defaults(func=cmd_sim_vlf)

    p = sub.add_parser("fig4")
    p.add_argument("--q1", type=float, default=0.05)
    p.add_argument("--q2", type=float, default=0.10)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--n-grid", default="100:2000:100")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--bits", action="store_true")
    p.set_defaults(func=cmd_fig4)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if hasattr(args, "seed"):
            args.seed = resolve_seed(args.seed)
        if hasattr(args, "threads"):
            args.threads = resolve_threads(args.threads)
        return int(args.func(args) or 0)
    except FbxError as exc:
        print(f"fbx: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
