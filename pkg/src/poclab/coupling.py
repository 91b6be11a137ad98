"""Finite-width networks coupled to a wide reference network.

All widths start as prefixes of one width-M initialization and are trained in
lockstep on the same batches.  The wide network stands in for the mean-field
limit, so every coupling error here is a proxy: Delta(i) compares neuron i of
the width-m network with neuron i of the width-M network.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from ._rng import make_rng
from .data import GaussianIso, init_particles
from .diagnostics import CoupledSnapshots, assemble_interaction
from .dynamics import (FlowSchedule, NumericalAbort, ProblemSpec, Seeds, VelocityField,
                       dump_state, loss_population, make_data, network_output, step, write_metrics_csv)
from .kernels import LinkFunction, pair_kernel_sigma
from .particles import ParticleSystem
from .svgplot import write_chart

HIST_BINS = 64
HIST_RANGE = (1e-8, 2.0)
HIST_CHECKPOINTS = 8
PROXY_NOTE = ("mean-field limit replaced by a width-M network; Delta(i) = w_m(i) - w_M(i) for i <= m "
              "is a proxy for the true coupling error")
SERIES = ("risk", "func_error", "scaled_func_error", "mean_delta", "mean_delta_sq", "scaled_param_error")
CSV_COLUMNS = ("step", "time", "risk", "func_error", "scaled_func_error", "mean_delta", "scaled_param_error")


def hist_edges():
    return np.geomspace(HIST_RANGE[0], HIST_RANGE[1], HIST_BINS + 1)


@dataclass
class CouplingRecord:
    widths: list
    M: int
    eta: float
    steps: list = field(default_factory=list)
    times: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    risk_M: list = field(default_factory=list)
    histograms: list = field(default_factory=list)  # (step, m, counts, n_below)
    meta: dict = field(default_factory=dict)
    snapshots: CoupledSnapshots | None = None
    final: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for m in self.widths:
            self.series.setdefault(m, {k: [] for k in SERIES})

    def rows(self, m):
        s = self.series[m]
        for k in range(len(self.steps)):
            yield (self.steps[k], self.times[k], s["risk"][k], s["func_error"][k], s["scaled_func_error"][k],
                   s["mean_delta"][k], s["scaled_param_error"][k])

    def check(self):
        for m in self.widths:
            for name, vals in self.series[m].items():
                if len(vals) != len(self.steps):
                    raise ValueError(f"series {name} for m={m} is off the time grid")
                if any(v < 0 for v in vals):
                    raise ValueError(f"negative entry in {name} for m={m}")


# ---------------------------------------------------------------- function error

def _closed_form_ok(cov, act):
    return isinstance(cov, GaussianIso) and isinstance(act, LinkFunction)


def _self_term(sys_: ParticleSystem, qc):
    return _accel.pair_sum(sys_.weights, sys_.b, sys_.weights, sys_.b, qc) / (sys_.m * sys_.m)


def function_error_closed(sysA: ParticleSystem, sysB: ParticleSystem, act, bb=None) -> float:
    """E(f_A - f_B)^2 as exact pairwise kernel sums; ``bb`` may carry B's precomputed self term."""
    qc = pair_kernel_sigma(act).array
    aa = _self_term(sysA, qc)
    bb = _self_term(sysB, qc) if bb is None else bb
    ab = _accel.pair_sum(sysA.weights, sysA.b, sysB.weights, sysB.b, qc) / (sysA.m * sysB.m)
    return float(max(aa - 2.0 * ab + bb, 0.0))


def function_error_mc(sysA, sysB, cov, act, n_eval: int, seed: int):
    """(mean, stderr) of (f_A - f_B)^2 over fresh covariate samples."""
    X = cov.sample(n_eval, make_rng(seed, "func_error"))
    r = network_output(sysA, X, act) - network_output(sysB, X, act)
    r2 = r * r
    se = float(r2.std(ddof=1) / math.sqrt(n_eval)) if n_eval > 1 else float("nan")
    return float(r2.mean()), se


def function_error(sysA: ParticleSystem, sysB: ParticleSystem, cov, act, n_eval: int = 1 << 16,
                   seed: int = 0) -> float:
    if sysA.d != sysB.d:
        raise ValueError("systems live in different dimensions")
    if _closed_form_ok(cov, act):
        return function_error_closed(sysA, sysB, act)
    return function_error_mc(sysA, sysB, cov, act, n_eval, seed)[0]


def _risk(sys_, problem, X=None, y=None):
    if problem.closed_form:
        return loss_population(sys_, problem.target, problem.activation)
    r = network_output(sys_, X, problem.activation) - y
    return float(np.mean(r * r))


# ---------------------------------------------------------------- coupled run

def _histogram(norms):
    below = int(np.sum(norms < HIST_RANGE[0]))
    counts, _ = np.histogram(norms[norms >= HIST_RANGE[0]], bins=hist_edges())
    return counts.astype(int), below


def run_coupled(problem: ProblemSpec, widths, M: int | None, schedule: FlowSchedule, seed, *,
                n_eval: int = 1 << 16, keep_snapshots: bool = False, dump_dir=None) -> CouplingRecord:
    """Evolve widths and the width-M reference in lockstep on identical batches."""
    widths = sorted(int(m) for m in widths)
    if not widths or widths[0] < 1:
        raise ValueError("need at least one positive width")
    M = 4 * widths[-1] if M is None else int(M)
    if widths[-1] >= M:
        raise ValueError(f"width {widths[-1]} must be smaller than the proxy width M={M}")
    seeds = Seeds.coerce(seed)
    data = make_data(problem, schedule, seeds.data)
    field_ = VelocityField(problem, schedule, data, seeds.batch)
    big = init_particles(problem.d, M, seeds.init, problem.second_layer)
    systems = {m: big.prefix(m) for m in widths}
    act = problem.activation
    closed_fe = _closed_form_ok(problem.covariates, act)
    qc = pair_kernel_sigma(act).array if closed_fe else None

    rec = CouplingRecord(widths, M, schedule.eta)
    rec.meta = {"proxy": PROXY_NOTE, "M": M, "widths": widths, "mode": schedule.mode,
                "function_error": "closed form" if closed_fe else f"monte carlo, n_eval={n_eval}",
                "seeds": {"init": seeds.init, "data": seeds.data, "batch": seeds.batch}}
    hist_steps = sorted(set(int(round(x)) for x in np.linspace(0, schedule.n_steps, HIST_CHECKPOINTS)))
    if keep_snapshots:
        m0 = widths[0]
        rec.snapshots = CoupledSnapshots(schedule.eta, [], [], [], systems[m0].b.copy(), big.b.copy(),
                                         mode=schedule.mode)

    def record(k):
        rec.steps.append(k)
        rec.times.append(k * schedule.eta)
        Xe = ye = None
        if not (problem.closed_form and closed_fe):
            Xe = problem.covariates.sample(n_eval, make_rng(seeds.data, "eval", k))
            ye = problem.target(Xe)
        rec.risk_M.append(_risk(big, problem, Xe, ye))
        bb = _self_term(big, qc) if closed_fe else None
        fM = network_output(big, Xe, act) if not closed_fe else None
        for m in widths:
            s = systems[m]
            if closed_fe:
                fe = function_error_closed(s, big, act, bb)
            else:
                r = network_output(s, Xe, act) - fM
                fe = float(np.mean(r * r))
            dn = np.linalg.norm(s.weights - big.weights[:m], axis=1)
            md = float(dn.mean())
            ser = rec.series[m]
            ser["risk"].append(_risk(s, problem, Xe, ye))
            ser["func_error"].append(fe)
            ser["scaled_func_error"].append(m * fe)
            ser["mean_delta"].append(md)
            ser["mean_delta_sq"].append(float(np.mean(dn * dn)))
            ser["scaled_param_error"].append(m * md * md)

    def histograms(k):
        for m in widths:
            dn = np.linalg.norm(systems[m].weights - big.weights[:m], axis=1)
            counts, below = _histogram(dn)
            rec.histograms.append((k, m, counts, below))

    def snapshot(k, v_small=None):
        if rec.snapshots is not None:
            sn = rec.snapshots
            sn.steps.append(k)
            sn.small.append(systems[widths[0]].weights.copy())
            sn.large.append(big.weights.copy())
            if v_small is not None:
                sn.vel_small.append(v_small)

    record(0)
    if 0 in hist_steps:
        histograms(0)
    for k in range(1, schedule.n_steps + 1):
        batch = field_.next_batch()
        try:
            V_big = field_(big, batch)
            new = {}
            for m in widths:
                V = field_(systems[m], batch)
                if m == widths[0]:
                    snapshot(k - 1, V if schedule.mode == "empirical" else None)
                new[m] = step(systems[m], V, schedule.eta)
            big = step(big, V_big, schedule.eta)
        except (NumericalAbort, FloatingPointError) as exc:
            raise NumericalAbort(f"{exc} at step {k}", dump_state(big.weights, k - 1, dump_dir)) from exc
        systems = new
        if k % schedule.record_every == 0 or k == schedule.n_steps:
            record(k)
        if k in hist_steps:
            histograms(k)
    snapshot(schedule.n_steps)
    rec.final = {**systems, "M": big}
    rec.check()
    return rec


# ---------------------------------------------------------------- checks and summaries

def coupling_inequality_check(func_error: float, mean_delta: float, m: int, constant: float = 10.0) -> dict:
    """func_error / ((E|Delta|)^2 + log(m)/m), flagged above ``constant``."""
    denom = mean_delta ** 2 + math.log(m) / m
    ratio = func_error / denom
    return {"ratio": ratio, "constant": constant, "flagged": bool(ratio > constant)}


def quadratic_response(system: ParticleSystem, eps: float, act, seed: int = 0) -> dict:
    """Function error and interaction quadratic form for Delta(i) = eps * u_i, u_i random unit tangents."""
    rng = make_rng(seed, "quad_response")
    W = system.weights
    U = rng.standard_normal(W.shape)
    U -= np.sum(U * W, axis=1, keepdims=True) * W
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    H = assemble_interaction(W, act, system.b)
    m = system.m

    def fe(c):
        Wp = W + c * U
        Wp /= np.linalg.norm(Wp, axis=1, keepdims=True)
        return function_error_closed(system.with_weights(Wp), system, act)

    def qform(c):
        v = (c * U).reshape(-1)
        return float(v @ H @ v) / (m * m)

    f1, f2 = fe(eps), fe(2 * eps)
    q1, q2 = qform(eps), qform(2 * eps)
    return {"eps": eps, "func_error": f1, "fitted_C": f1 / eps ** 2, "func_error_doubling_ratio": f2 / f1,
            "quadratic_form": q1, "quadratic_form_doubling_ratio": q2 / q1, "func_error_over_form": f1 / q1}


def monotonicity_score(values) -> float:
    """|net change| / total variation; 1 for a monotone curve."""
    v = np.asarray(values, dtype=np.float64)
    tv = float(np.sum(np.abs(np.diff(v))))
    return 1.0 if tv == 0 else abs(float(v[-1] - v[0])) / tv


def width_stability(records, metric: str, skip_zero_time: bool = False) -> dict:
    """Seed-averaged curves per width and the max/min ratio across widths at each recorded time."""
    widths = records[0].widths
    times = np.asarray(records[0].times)
    curves = {m: np.mean([r.series[m][metric] for r in records], axis=0) for m in widths}
    stack = np.array([curves[m] for m in widths])
    keep = np.ones(len(times), bool)
    if skip_zero_time:
        keep &= times > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = stack.max(axis=0) / stack.min(axis=0)
    ratio = np.where(keep, ratio, np.nan)
    return {"times": times, "curves": curves, "ratio": ratio,
            "max_ratio": float(np.nanmax(ratio)) if np.any(keep) else float("nan"),
            "monotonicity": {m: monotonicity_score(curves[m][keep]) for m in widths}}


# ---------------------------------------------------------------- output

def write_record(rec: CouplingRecord, out_dir) -> list:
    """Per-width CSVs, histogram CSV, metadata JSON and three SVG panels; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for m in rec.widths:
        p = out / f"coupling_m{m}.csv"
        write_metrics_csv(p, CSV_COLUMNS, rec.rows(m))
        files.append(p)
    p = out / "coupling_reference.csv"
    write_metrics_csv(p, ("step", "time", "risk_M"), zip(rec.steps, rec.times, rec.risk_M))
    files.append(p)
    p = out / "delta_histograms.csv"
    edges = hist_edges()
    write_metrics_csv(p, ("step", "m", "below_1e-8") + tuple(f"bin_{e:.3e}" for e in edges[:-1]),
                      ((k, m, below, *counts) for k, m, counts, below in rec.histograms))
    files.append(p)
    p = out / "coupling_meta.json"
    p.write_text(json.dumps(rec.meta, indent=2, sort_keys=True) + "\n")
    files.append(p)
    panels = (("risk", "risk |f_m - f*|^2", True), ("scaled_func_error", "scaled function error m|f_m - f_M|^2", True),
              ("scaled_param_error", "scaled parameter error m (E|Delta|)^2", False))
    for key, title, logy in panels:
        p = out / f"{key}.svg"
        write_chart(p, [(f"m={m}", rec.times, rec.series[m][key]) for m in rec.widths], title=title,
                    xlabel="time", ylabel=key, logy=logy)
        files.append(p)
    return files
