"""Command line entry point: run, couple, diagnose, reduce, potential, report.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__, _accel
from .config import ConfigError, canonical_json, load_config
from .coupling import monotonicity_score, run_coupled, write_record
from .diagnostics import (j_avg_estimate, j_max_estimate, local_hessians, self_concordance_series,
                          top_tangent_eigenvalue)
from .dynamics import ClosedFormUnavailable, NumericalAbort, Seeds, fmt, run_flow, write_metrics_csv
from .potential import assign_xi_infinity, lemma_checks, limit_atoms, spectral_decompose
from .reduced import ensemble_quantiles, hermite_link, run_reduced
from .svgplot import write_chart

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
TRIVIAL_TOL = 0.0
WIDTH_CSV = re.compile(r"coupling_m(\d+)\.csv")


def _versions():
    import scipy

    out = {"poclab": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__, "backend": _accel.BACKEND}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        out["numba"] = None
    return out


def _sha1(path: Path) -> str:
    return hashlib.sha1(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg, files, extra=None):
    """manifest.json with the full config, its content hash, versions and every output file."""
    rel = sorted(str(Path(f).relative_to(out)) for f in files)
    man = {"name": cfg.name, "pipeline": cfg.pipeline, "config": cfg.raw, "content_hash": cfg.content_hash(),
           "seeds": cfg.seeds, "versions": _versions(), "files": {r: _sha1(out / r) for r in rel}}
    if extra:
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- pipelines

def _pipe_flow(cfg, out: Path):
    ck = out / "checkpoints" if cfg.schedule.checkpoint_every else None
    if ck:
        ck.mkdir(parents=True, exist_ok=True)
    prob = cfg.problem
    tr = run_flow(prob, cfg.schedule, Seeds(**cfg.seeds), checkpoint_dir=ck, dump_dir=out / "abort")
    files = [out / "metrics.csv"]
    tr.write_csv(files[0])
    files.append(out / "loss.svg")
    series = [("population", tr.times, tr.loss_pop), ("empirical", tr.times, tr.loss_emp)]
    write_chart(files[-1], series, title="loss", xlabel="time", ylabel="loss", logy=True)
    files.append(out / "alignment.svg")
    write_chart(files[-1], [("mean alignment", tr.times, tr.alignment)], title="mean alignment", xlabel="time")
    files += [Path(p) for p in tr.checkpoints]
    return files, tr


def _pipe_couple(cfg, out: Path):
    prob = cfg.problem
    rec = run_coupled(prob, cfg.widths, cfg.M, cfg.schedule, Seeds(**cfg.seeds), dump_dir=out / "abort")
    return write_record(rec, out), rec


def _pipe_reduce(cfg, out: Path, ds=None, kstar=None, delta=None, eta=None):
    r = cfg.reduce if cfg is not None else {}
    ds = ds or list(r.get("d", [16, 32, 64]))
    kstar = kstar or int(r.get("kstar", 4))
    delta = delta or float(r.get("delta", 0.3))
    eta = eta or float(r.get("eta", 0.01))
    link = hermite_link(kstar)
    files = [out / "escape_times.csv"]
    rows, series = [], []
    for d in ds:
        run = run_reduced(link, d, ensemble_quantiles(d), eta, delta, max_steps=2_000_000, record_every=100)
        rows.append((d, kstar, delta, run.T_delta if run.T_delta is not None else float("nan")))
        p = out / f"reduced_d{d}.csv"
        write_metrics_csv(p, ("step", "time", "loss_proxy", f"r_{kstar}", "alpha_q10", "alpha_q50", "alpha_q90"),
                          run.rows(kstar))
        files.append(p)
        series.append((f"d={d}", run.times[::100].tolist(), run.loss[::100].tolist()))
    write_metrics_csv(files[0], ("d", "kstar", "delta", "T_delta"), rows)
    files.append(out / "reduced_loss.svg")
    write_chart(files[-1], series, title="reduced loss proxy", xlabel="time", ylabel="loss", logy=True)
    return files, rows


def _pipe_potential(cfg, out: Path):
    prob = cfg.problem
    m = cfg.widths[0]
    rec = run_coupled(prob, [m], cfg.M, cfg.schedule, Seeds(**cfg.seeds), dump_dir=out / "abort")
    files = write_record(rec, out)
    big = rec.final["M"]
    Wt = big.weights[:m]
    delta = rec.final[m].weights - Wt
    bsd = spectral_decompose(assign_xi_infinity(Wt, limit_atoms(prob.target)), prob.activation)
    rep = lemma_checks(Wt, delta, bsd, float(cfg.diagnostics.get("tau", 0.2)), prob, big)
    p = out / "bsd.json"
    p.write_text(bsd.to_json() + "\n")
    files.append(p)
    p = out / "lemma_report.json"
    p.write_text(json.dumps(rep, indent=2, sort_keys=True, default=float) + "\n")
    files.append(p)
    p = out / "lemma_report.txt"
    p.write_text(_lemma_text(rep))
    files.append(p)
    return files, rep


def _lemma_text(rep) -> str:
    a, b, c = rep["interaction"], rep["local"], rep["perturbation"]
    lines = [f"balance C_b = {fmt(rep['balance'])}, Phi = {fmt(rep['phi'])}, Omega = {fmt(rep['omega'])}",
             f"interaction descent: lhs {fmt(a['lhs'])} vs main rhs {fmt(a['main_rhs'])}, fitted C {fmt(a['fitted_C'])}",
             f"local descent: lhs {fmt(b['lhs'])} (negative: {b['negative']}), margin {fmt(b['lsc_margin'])}, "
             f"fitted C {fmt(b['fitted_C'])}",
             f"L1 perturbation: {c['passed']}/{c['trials']} trials pass, worst ratio {fmt(c['worst_ratio'])}"]
    return "\n".join(lines) + "\n"


def _pipe_diagnose(cfg, out: Path):
    prob = cfg.problem
    sch = cfg.schedule
    if sch.record_every != 1 or not sch.store_weights:
        from dataclasses import replace

        sch = replace(sch, record_every=1, store_weights=True)
    tr = run_flow(prob, sch, Seeds(**cfg.seeds), dump_dir=out / "abort")
    files = [out / "metrics.csv"]
    tr.write_csv(files[0])
    n_part = int(cfg.diagnostics.get("n_particles", 32))
    parts = np.arange(min(n_part, prob.m))
    stride = max(1, len(tr.weights) // 50)
    rows = []
    for k in range(0, len(tr.weights), stride):
        sys_k = tr.system_at(k)
        D = local_hessians(sys_k.weights[parts], sys_k, prob.target, prob.activation, bq=sys_k.b[parts])
        for p, Dp in zip(parts, D):
            rows.append((tr.steps[k], int(p), top_tangent_eigenvalue(Dp, sys_k.weights[p])))
    files.append(out / "eigenvalues.csv")
    write_metrics_csv(files[-1], ("step", "particle", "lambda_max"), rows)
    summary = {}
    if prob.closed_form and prob.target.atoms()[0].shape[0] == 1:
        rep = self_concordance_series(tr, prob, range(0, len(tr.weights), stride), n_particles=n_part)
        files.append(out / "self_concordance.csv")
        write_metrics_csv(files[-1], ("step", "particle", "alpha", "lambda_max", "reference"), rep.rows)
        summary["self_concordance"] = {"max_ratio": rep.max_ratio, "violations": rep.violations,
                                       "checked": rep.checked}
    if cfg.diagnostics.get("j_stats"):
        jm = j_max_estimate(tr, prob, particles=parts)
        files.append(out / "j_stats.csv")
        write_metrics_csv(files[-1], ("s", "t", "j_max"), jm.grid)
        ja = j_avg_estimate(tr, prob, float(cfg.diagnostics.get("tau", 0.2)))
        summary["j_max"] = {"value": jm.value, "s": jm.s, "t": jm.t, "particle": jm.particle}
        summary["j_avg"] = {"value": ja.value, "argmax": list(ja.argmax)}
    p = out / "diagnostics.json"
    p.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files.append(p)
    return files, summary


PIPES = {"flow": _pipe_flow, "couple": _pipe_couple, "reduce": _pipe_reduce, "potential": _pipe_potential,
         "diagnose": _pipe_diagnose}


def execute(cfg, out: Path, pipeline: str | None = None):
    """Run one pipeline for every repeat; repeats go to seed_<k> subdirectories."""
    pipeline = pipeline or cfg.pipeline
    runs = []
    for k in range(cfg.repeats):
        c = cfg if cfg.repeats == 1 else cfg.with_seeds(cfg.seeds["init"] + k, cfg.seeds["data"] + k,
                                                          cfg.seeds["batch"] + k)
        c.pipeline = pipeline
        d = out if cfg.repeats == 1 else out / f"seed_{k}"
        d.mkdir(parents=True, exist_ok=True)
        files, _ = PIPES[pipeline](c, d)
        write_manifest(d, c, files)
        runs.append(d)
    return runs


# ---------------------------------------------------------------- report

def _read_csv(path):
    with open(path) as fh:
        rd = csv.reader(fh)
        head = next(rd)
        cols = {h: [] for h in head}
        for row in rd:
            for h, v in zip(head, row):
                cols[h].append(float(v))
    return {h: np.asarray(v) for h, v in cols.items()}


def _expand(dirs):
    out = []
    for d in map(Path, dirs):
        subs = sorted(p for p in d.glob("seed_*") if p.is_dir())
        out += subs if subs and not (d / "manifest.json").exists() else [d]
    return out


def build_report(dirs) -> dict:
    runs = _expand(dirs)
    if not runs:
        raise ConfigError("no run directories given")
    mans = []
    for d in runs:
        mp = d / "manifest.json"
        if not mp.exists():
            raise ConfigError(f"incomplete run: {d} has no manifest.json")
        man = json.loads(mp.read_text())
        for f in man["files"]:
            if not (d / f).exists():
                raise ConfigError(f"incomplete run: {d / f} missing")
        mans.append(man)
    pipes = {m["pipeline"] for m in mans}
    rep = {"runs": [str(d) for d in runs], "pipelines": sorted(pipes), "seeds": [m["seeds"] for m in mans]}
    if "couple" in pipes or "potential" in pipes:
        widths = sorted({int(g.group(1)) for m in mans for f in m["files"]
                         if (g := WIDTH_CSV.fullmatch(f))})
        per = {}
        trivial = True
        for w in widths:
            tabs = [_read_csv(d / f"coupling_m{w}.csv") for d in runs if (d / f"coupling_m{w}.csv").exists()]
            n = min(len(t["time"]) for t in tabs)
            entry = {"time": tabs[0]["time"][:n].tolist()}
            for key in ("scaled_func_error", "scaled_param_error", "risk"):
                stack = np.array([t[key][:n] for t in tabs])
                entry[key] = {"mean": stack.mean(0).tolist(), "min": stack.min(0).tolist(),
                              "max": stack.max(0).tolist()}
            trivial &= all(np.all(t["mean_delta"] <= TRIVIAL_TOL) for t in tabs)
            per[w] = entry
        rep["widths"] = widths
        rep["trivial_all_zero_deltas"] = bool(trivial)
        for key in ("scaled_func_error", "scaled_param_error"):
            n = min(len(per[w]["time"]) for w in widths)
            stack = np.array([per[w][key]["mean"][:n] for w in widths])
            t = np.asarray(per[widths[0]]["time"][:n])
            keep = (t > 0) & np.all(stack > 0, axis=0)
            ratio = stack[:, keep].max(0) / stack[:, keep].min(0) if np.any(keep) else np.array([np.nan])
            rep[f"{key}_width_ratio_max"] = float(np.nanmax(ratio)) if np.any(np.isfinite(ratio)) else float("nan")
            rep[f"{key}_monotonicity"] = {str(w): monotonicity_score(np.asarray(per[w][key]["mean"])[:n][t > 0])
                                          if np.any(t > 0) else 1.0 for w in widths}
        rep["series"] = {str(w): per[w] for w in widths}
    if "reduce" in pipes:
        tabs = [_read_csv(d / "escape_times.csv") for d in runs if (d / "escape_times.csv").exists()]
        t = tabs[0]
        rep["escape_times"] = {str(int(d)): float(T) for d, T in zip(t["d"], t["T_delta"])}
        ds = sorted(int(d) for d in t["d"])
        if len(ds) >= 2:
            rep["escape_ratio_last_first"] = rep["escape_times"][str(ds[-1])] / rep["escape_times"][str(ds[0])]
    for d in runs:
        for name in ("lemma_report.json", "diagnostics.json"):
            if (d / name).exists():
                rep.setdefault(name[:-5], []).append(json.loads((d / name).read_text()))
    return rep


def _report_text(rep) -> str:
    lines = [f"runs: {len(rep['runs'])}  pipelines: {', '.join(rep['pipelines'])}"]
    if "widths" in rep:
        if rep["trivial_all_zero_deltas"]:
            lines.append("all coupling deltas are zero: trivial run (eta = 0 or identical systems)")
        for key in ("scaled_func_error", "scaled_param_error"):
            lines.append(f"{key}: max/min across widths {fmt(rep[key + '_width_ratio_max'])}")
            mono = ", ".join(f"m={w}: {v:.3f}" for w, v in rep[key + "_monotonicity"].items())
            lines.append(f"  monotonicity {mono}")
        for w in rep["widths"]:
            s = rep["series"][str(w)]
            f = s["scaled_func_error"]
            lines.append(f"  m={w} final scaled func error {fmt(f['mean'][-1])} "
                         f"[{fmt(f['min'][-1])}, {fmt(f['max'][-1])}]")
    if "escape_times" in rep:
        lines.append("escape times: " + ", ".join(f"d={d}: {fmt(T)}" for d, T in rep["escape_times"].items()))
        if "escape_ratio_last_first" in rep:
            lines.append(f"  ratio last/first {fmt(rep['escape_ratio_last_first'])}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- argparse

def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seeds(args.seed, args.seed, args.seed, cfg.repeats)
    return cfg


def _out(args, cfg):
    return Path(args.out or cfg.output_dir)


def cmd_run(args, pipeline=None):
    cfg = _load(args)
    out = _out(args, cfg)
    runs = execute(cfg, out, pipeline)
    print(f"wrote {len(runs)} run(s) under {out}")
    return EXIT_OK


def cmd_reduce(args):
    if args.config:
        cfg = _load(args)
        out = _out(args, cfg)
    else:
        cfg = None
        out = Path(args.out or "runs/reduce")
    out.mkdir(parents=True, exist_ok=True)
    ds = [int(x) for x in args.d.split(",")] if args.d else None
    files, rows = _pipe_reduce(cfg, out, ds, args.kstar, args.delta, args.eta)
    raw = {"pipeline": "reduce", "reduce": {"d": [r[0] for r in rows], "kstar": rows[0][1], "delta": rows[0][2],
                                            "eta": args.eta or (cfg.reduce["eta"] if cfg else 0.01)}}
    body = canonical_json(raw).encode()
    man = {"name": "reduce", "pipeline": "reduce", "config": raw, "seeds": {},
           "content_hash": hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest(), "versions": _versions(),
           "files": {str(Path(f).relative_to(out)): _sha1(Path(f)) for f in sorted(files)}}
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    for r in rows:
        print(f"d={r[0]} kstar={r[1]} delta={r[2]} T={fmt(r[3])}")
    return EXIT_OK


def cmd_report(args):
    rep = build_report(args.dirs)
    text = _report_text(rep)
    print(text, end="")
    if args.json:
        Path(args.json).write_text(json.dumps(rep, indent=2, sort_keys=True, default=float) + "\n")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="poclab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    def cfg_cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None, help="override init/data/batch seeds")
        p.add_argument("--out", default=None, help="output directory (default from config)")
        return p

    cfg_cmd("run", "run the pipeline named in the config")
    cfg_cmd("couple", "coupled finite-width / reference-width run")
    cfg_cmd("diagnose", "flow plus Hessian, self-concordance and stability statistics")
    cfg_cmd("potential", "coupled run, spectral decomposition and lemma checks")
    r = sub.add_parser("reduce", help="reduced alignment ODE sweep over dimensions")
    r.add_argument("--config", default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None)
    r.add_argument("--d", default=None, help="comma-separated dimensions, e.g. 16,32,64")
    r.add_argument("--kstar", type=int, default=None)
    r.add_argument("--delta", type=float, default=None)
    r.add_argument("--eta", type=float, default=None)
    rp = sub.add_parser("report", help="summarize one or more run directories")
    rp.add_argument("dirs", nargs="+")
    rp.add_argument("--json", default=None, help="also write the report as JSON")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "run":
            return cmd_run(args)
        if args.cmd in ("couple", "diagnose", "potential"):
            return cmd_run(args, args.cmd)
        if args.cmd == "reduce":
            return cmd_reduce(args)
        return cmd_report(args)
    except (ConfigError, ClosedFormUnavailable) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}; state dumped to {exc.dump_path}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
