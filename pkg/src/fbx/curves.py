"""Bound curves: containers, CSV/JSON emission and the three-curve comparison."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .antisym import make_parallel_bsc
from .channel import pair_digest, solve_caid
from .errors import IoError, OrderingViolation, OutOfRange
from .flf_bounds import ConverseQuery, converse_point, increment_law, normal_approx_feedback
from .rcu import rcu_point

KINDS = ("converse", "rcu", "flf-sim", "vlf-converse", "vlf-sim", "normal-approx")
BASE_COLUMNS = ("n", "logM_nats", "rate_bits_per_use", "kind")
LOG2 = math.log(2.0)


def _plain(x):
    """Convert numpy scalars and arrays to JSON-native values."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


@dataclass(frozen=True)
class CurvePoint:
    n: float
    logM_nats: float
    kind: str
    extras: dict = field(default_factory=dict)

    @property
    def rate_bits(self) -> float:
        return self.logM_nats / (self.n * LOG2) if self.n > 0 else math.nan


@dataclass
class BoundCurve:
    points: list
    channel_digest: str
    seed: int
    epsilon: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        kinds = {p.kind for p in self.points}
        if len(kinds) > 1:
            raise OutOfRange(f"mixed kinds in one curve: {sorted(kinds)}")
        for k in kinds:
            if k not in KINDS:
                raise OutOfRange(f"unknown curve kind {k!r}")
        self.points = sorted(self.points, key=lambda p: p.n)

    @property
    def kind(self):
        return self.points[0].kind if self.points else None

    def rates(self) -> np.ndarray:
        return np.array([p.rate_bits for p in self.points])

    def to_dict(self) -> dict:
        return {
            "channel_digest": self.channel_digest, "seed": self.seed, "epsilon": self.epsilon,
            "version": __version__, "metadata": self.metadata,
            "points": [{"n": p.n, "logM_nats": p.logM_nats, "rate_bits_per_use": p.rate_bits,
                        "kind": p.kind, **p.extras} for p in self.points],
        }


def _extra_columns(curve: BoundCurve):
    cols = []
    for p in curve.points:
        for k in p.extras:
            if k not in cols:
                cols.append(k)
    return cols


def _fmt(v):
    if isinstance(v, float) or isinstance(v, np.floating):
        return repr(float(v))
    return str(v)


def curve_to_csv(curve: BoundCurve, bits: bool = False) -> str:
    extras = _extra_columns(curve)
    header = list(BASE_COLUMNS) + extras
    if bits:
        header = [h.replace("_nats", "_bits") for h in header]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for p in curve.points:
        logm = p.logM_nats / LOG2 if bits else p.logM_nats
        row = [_fmt(p.n), _fmt(logm), _fmt(p.rate_bits), p.kind]
        for k in extras:
            v = p.extras.get(k, "")
            if bits and k.endswith("_nats") and isinstance(v, (int, float)):
                v = v / LOG2
            row.append(_fmt(v))
        writer.writerow(row)
    return buf.getvalue()


def curve_to_json(curve: BoundCurve, bits: bool = False) -> str:
    d = curve.to_dict()
    if bits:
        for p in d["points"]:
            for k in [k for k in p if k.endswith("_nats")]:
                v = p.pop(k)
                p[k.replace("_nats", "_bits")] = v / LOG2 if isinstance(v, (int, float)) else v
    d["units"] = "bits" if bits else "nats"
    return dumps(d)


def _num(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def parse_csv(text: str, seed: int = 0, channel_digest: str = "", epsilon: float = math.nan) -> BoundCurve:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise IoError("empty CSV")
    header = rows[0]
    if header[:4] not in (list(BASE_COLUMNS), ["n", "logM_bits", "rate_bits_per_use", "kind"]):
        raise IoError(f"unexpected CSV header {header}")
    bits = header[1] == "logM_bits"
    pts = []
    for r in rows[1:]:
        logm = float(r[1]) * LOG2 if bits else float(r[1])
        extras = {}
        for k, v in zip(header[4:], r[4:]):
            val = _num(v)
            if bits and k.endswith("_bits") and isinstance(val, (int, float)):
                k, val = k.replace("_bits", "_nats"), val * LOG2
            extras[k] = val
        pts.append(CurvePoint(_num(r[0]), logm, r[3], extras))
    return BoundCurve(pts, channel_digest, seed, epsilon)


def emit(curve: BoundCurve, fmt: str, path, bits: bool = False) -> None:
    if fmt == "csv":
        text = curve_to_csv(curve, bits)
    elif fmt == "json":
        text = curve_to_json(curve, bits)
    else:
        raise OutOfRange(f"unknown format {fmt!r}")
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def parse_grid(spec: str):
    """'a:b:step' (inclusive) or a comma list; empty string gives []."""
    spec = (spec or "").strip()
    if not spec:
        return []
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise OutOfRange(f"grid {spec!r} must be start:stop:step")
        a, b, s = (int(x) for x in parts)
        if s <= 0:
            raise OutOfRange("grid step must be positive")
        return list(range(a, b + 1, s))
    return [int(x) for x in spec.split(",") if x.strip()]


def comparison_curves(q1: float, q2: float, epsilon: float, n_grid, seed: int = 0, mapper=map):
    """Converse, RCU and normal-approximation curves for the parallel-BSC pair."""
    pair = make_parallel_bsc(q1, q2)
    analysis = solve_caid(pair)
    law = increment_law(analysis, pair)
    digest = pair_digest(pair)
    n_grid = sorted(int(n) for n in n_grid)

    def conv(n):
        r = converse_point(pair, analysis, ConverseQuery(n, epsilon), law)
        return CurvePoint(n, r.logM, "converse", {"lambda": r.lambda_used})

    def rcu(n):
        r = rcu_point(n, epsilon, q1, q2)
        return CurvePoint(n, r.logM, "rcu", {"epsilon_achieved": r.epsilon_achieved,
                                             "truncation_mass": r.truncation_mass})

    def normal(n):
        return CurvePoint(n, normal_approx_feedback(analysis, n, epsilon), "normal-approx")

    meta = {"q1": q1, "q2": q2, "capacity_nats": analysis.capacity_c,
            "dispersion_nats2": analysis.v_weighted}
    curves = {}
    for name, fn in (("converse", conv), ("rcu", rcu), ("normal-approx", normal)):
        extra = {"assumption": "input-invariant weighted density law"} if name == "converse" else {}
        curves[name] = BoundCurve(list(mapper(fn, n_grid)), digest, seed, epsilon,
                                  dict(meta, method=name, **extra))
    return curves


def check_ordering(curves, tol: float = 0.0):
    bad = []
    for c, r, nrm in zip(curves["converse"].points, curves["rcu"].points,
                         curves["normal-approx"].points):
        if not (r.logM_nats <= nrm.logM_nats + tol and nrm.logM_nats <= c.logM_nats + tol):
            bad.append((c.n, r.logM_nats, nrm.logM_nats, c.logM_nats))
    if bad:
        lines = "; ".join(f"n={n}: rcu={a:.4f} normal={b:.4f} converse={c:.4f}"
                          for n, a, b, c in bad)
        raise OrderingViolation(f"rcu <= normal <= converse fails at {lines}")


def run_fig4(q1: float, q2: float, epsilon: float, n_grid, out_dir=None, seed: int = 0,
             bits: bool = False, mapper=map):
    """Compute, check ordering and (optionally) write fig4_{kind}.csv plus fig4.json."""
    curves = comparison_curves(q1, q2, epsilon, n_grid, seed, mapper)
    check_ordering(curves)
    if out_dir is not None:
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create {out_dir}: {exc}") from exc
        for name, c in curves.items():
            emit(c, "csv", os.path.join(out_dir, f"fig4_{name}.csv"), bits)
        combined = {name: c.to_dict() for name, c in curves.items()}
        try:
            with open(os.path.join(out_dir, "fig4.json"), "w") as fh:
                fh.write(dumps({"curves": combined, "units": "nats", "version": __version__}))
        except OSError as exc:
            raise IoError(f"cannot write fig4.json: {exc}") from exc
    return curves
