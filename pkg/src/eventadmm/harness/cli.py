"""Command line entry point.

Exit codes: 0 success, 1 run failure (a bound assertion or numerical
breakdown), 2 invalid arguments or spec.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from ..certify import certificate_report, diminishing_k0
from ..consensus import ConsensusConfig, ConsensusProblem, run_consensus, sharing_run, write_csv
from ..events import DropModel
from ..general_admm import GeneralConfig, general_reference, run_general
from ..graph import GraphConfig, run_graph
from ..objectives import Regularizer
from .data import gen_general_instance, gen_noniid_regression
from .spec import ExperimentSpec, SpecError, default_spec
from .studies import (GRAPH_COLUMNS, RUN_ERRORS, _policies, best_per_policy, best_savings,
                      consensus_instance, graph_instance, run_certify_grid, run_decay_study,
                      run_drop_study, run_graph_study, run_nonconvex_study, run_tradeoff_sweep,
                      trace_summary)

log = logging.getLogger("eventadmm")

SUBCOMMAND_KIND = {"sweep": "tradeoff-sweep", "drop-study": "drop-study", "decay-study": "decay-study",
                   "nonconvex-study": "nonconvex-study", "graph-run": "graph"}


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o).__name__)


def _emit(obj) -> None:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v
    print(json.dumps(clean(obj), indent=2, default=_json_default))


def _load_spec(args, kind: str | None) -> ExperimentSpec:
    if args.spec:
        spec = ExperimentSpec.load(args.spec)
        if kind is not None and spec.kind != kind:
            raise SpecError(f"kind: this subcommand expects {kind!r}, spec has {spec.kind!r}")
    else:
        spec = default_spec(kind or "consensus-lasso")
    if args.seed is not None:
        spec = spec.replace(seeds=(args.seed,))
    if args.out_dir is not None:
        spec = spec.replace(out_dir=args.out_dir)
    return spec


def _out(spec: ExperimentSpec) -> Path:
    path = Path(spec.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


#%% subcommands

def cmd_run(spec: ExperimentSpec) -> dict:
    """Single run of the engine selected by ``spec.kind``; study kinds are dispatched."""
    out = _out(spec)
    seed = spec.seeds[0]
    kind = spec.kind
    if kind in ("consensus-lasso", "consensus-regression"):
        if kind == "consensus-regression":
            spec = spec.replace(lam=0.0)
        prob, ref = consensus_instance(spec, seed)
        up, down = _policies(spec, spec.deltas[0])
        cfg = ConsensusConfig(rho=spec.rho, alpha=spec.alpha, T=spec.T, seed=seed)
        tr, clog, _ = run_consensus(prob, cfg, up, DropModel(spec.p_drop, tuple(spec.drop_channels)),
                                    spec.horizon, ref, down_policy=down)
        tr.to_csv(out / f"{kind}_seed{seed}.csv")
        return trace_summary(tr, clog)
    if kind == "sharing":
        locs = gen_noniid_regression(spec.N, spec.rows_per_agent, spec.n, seed)
        g = Regularizer.l1(spec.lam) if spec.lam > 0 else Regularizer.zero()
        up, down = _policies(spec, spec.deltas[0])
        tr, clog = sharing_run(ConsensusProblem(locs, g), ConsensusConfig(rho=spec.rho, T=spec.T, seed=seed),
                               up, DropModel(spec.p_drop, tuple(spec.drop_channels)), spec.horizon, down)
        write_csv(out / f"sharing_seed{seed}.csv", ("k", "objective", "uploads", "downloads"),
                  ((k, tr.objective[k], int(tr.uploads[k]), int(tr.downloads[k])) for k in range(spec.horizon)))
        return {"final_objective": float(tr.objective[-1]), "load": clog.load}
    if kind == "general":
        prob = gen_general_instance(spec.p, spec.kappa, seed)
        rho = prob.certificate_rho(spec.eps)
        drops = DropModel(spec.p_drop, tuple(spec.drop_channels))
        cfg = GeneralConfig.uniform(rho, spec.alpha, spec.deltas[0], T=spec.T, drops=drops, seed=seed)
        tr, clog, _ = run_general(prob, cfg, spec.horizon)
        ref = general_reference(prob, rho)
        err = np.sum((tr.xi - ref.xi_star) ** 2, axis=(1, 2))
        write_csv(out / f"general_seed{seed}.csv", ("k", "xi_err_sq", "e_norm", "e_bound", "load"),
                  ((k, err[k + 1], tr.e_norm[k], tr.e_bound[k], tr.load[k]) for k in range(spec.horizon)))
        return {"kappa": prob.kappa, "rho": rho, "final_xi_err_sq": float(err[-1]), "load": clog.load}
    if kind == "graph":
        locs, graph, ref = graph_instance(spec, seed)
        up, _ = _policies(spec, spec.deltas[0])
        tr, clog = run_graph(locs, graph, GraphConfig(rho=spec.rho, T=spec.T, seed=seed), up,
                             DropModel(spec.p_drop, ("edge",)), spec.horizon, ref)
        tr.to_csv(out / f"graph_seed{seed}.csv")
        return {"kappa_graph": tr.kappa, "final_f_gap": float(tr.f_gap[-1]), "load": clog.load,
                "edges": graph.n_edges}
    if kind == "certify-grid":
        reports = run_certify_grid(delta=spec.delta0)
        (out / "certify_grid.json").write_text(json.dumps(reports, indent=2, default=_json_default))
        return {"points": len(reports), "feasible": sum(r["feasible"] for r in reports)}
    return STUDY[kind](spec)


def cmd_sweep(spec: ExperimentSpec) -> dict:
    res = run_tradeoff_sweep(spec)
    path = _out(spec) / "sweep.csv"
    res.to_csv(path)
    summary = {"rows": len(res.rows), "failed": int(res.column("failed").sum()), "csv": str(path)}
    if 0.0 in spec.deltas:
        summary["best_savings"] = {str(s): best_savings(res, s)[0] for s in spec.seeds}
    return summary


def cmd_drop(spec: ExperimentSpec) -> dict:
    out = _out(spec)
    summary = {}
    for seed in spec.seeds:
        runs = run_drop_study(spec, seed, out)
        summary[str(seed)] = {("inf" if T == math.inf else str(int(T))): trace_summary(tr, clog)
                              for T, (tr, clog) in runs.items()}
    return summary


def cmd_decay(spec: ExperimentSpec) -> dict:
    out = _out(spec)
    summary = {}
    for seed in spec.seeds:
        reps = run_decay_study(spec, seed, ts=tuple(spec.decay_t) + (0.0,))
        for t, rep in reps.items():
            write_csv(out / f"decay_t{t:g}_seed{seed}.csv", ("k", "xi_err_sq", "bound"), rep.rows())
        summary[str(seed)] = {f"{t:g}": {"slope": rep.slope, "bound_dominates": rep.dominated, "q": rep.q,
                                         "load": rep.load} for t, rep in reps.items()}
    summary["k0_exponent"] = "1/t (the induction step needs ((k0+1)/k0)^t <= 2/(1+tau^2))"
    summary["k0_examples"] = {f"t={t:g}": diminishing_k0(0.975, t) for t in spec.decay_t}
    return summary


def cmd_nonconvex(spec: ExperimentSpec) -> dict:
    out = _out(spec)
    summary = {}
    for seed in spec.seeds:
        rep = run_nonconvex_study(spec, seed)
        write_csv(out / f"nonconvex_seed{seed}.csv", ("K", "metric", "metric_zero_threshold"), rep.rows())
        summary[str(seed)] = {"slope": rep.slope, "slope_zero_threshold": rep.slope_exact, "load": rep.load}
    return summary


def cmd_graph(spec: ExperimentSpec) -> dict:
    rows = []
    for seed in spec.seeds:
        rows.extend(run_graph_study(spec, seed))
    write_csv(_out(spec) / "graph_study.csv", GRAPH_COLUMNS, rows)
    return {str(seed): best_per_policy([r for r in rows if r[0] == seed]) for seed in spec.seeds}


STUDY = {"tradeoff-sweep": cmd_sweep, "drop-study": cmd_drop, "decay-study": cmd_decay,
         "nonconvex-study": cmd_nonconvex}


def cmd_gen_data(spec: ExperimentSpec, fmt: str) -> dict:
    out = _out(spec)
    written = []
    for seed in spec.seeds:
        locs = gen_noniid_regression(spec.N, spec.rows_per_agent, spec.n, seed)
        path = out / f"data_seed{seed}.{fmt}"
        if fmt == "csv":
            header = ("agent", "target") + tuple(f"x{j}" for j in range(spec.n))
            write_csv(path, header, ((i, float(b), *map(float, row))
                                     for i, f in enumerate(locs) for row, b in zip(f.A, f.b)))
        else:
            np.savez(path, **{f"A{i}": f.A for i, f in enumerate(locs)}, **{f"b{i}": f.b for i, f in enumerate(locs)})
        written.append(str(path))
    return {"files": written}


#%% argument parsing

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eventadmm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, formats=("csv",)):
        p.add_argument("--spec", help="JSON experiment specification")
        p.add_argument("--seed", type=int, help="override the spec's seeds with one seed")
        p.add_argument("--out-dir", help="directory for CSV outputs")
        p.add_argument("--format", choices=formats, default="csv", help="output table format")
        return p

    common(sub.add_parser("run", help="single run, engine chosen by the spec's kind"))
    for name in SUBCOMMAND_KIND:
        common(sub.add_parser(name))
    common(sub.add_parser("gen-data", help="write generated regression shards"), ("csv", "npz"))
    c = sub.add_parser("certify", help="certificate report as JSON")
    c.add_argument("--kappa", type=float, required=True)
    c.add_argument("--alpha", type=float, default=1.0)
    c.add_argument("--eps", type=float, default=0.0)
    c.add_argument("--delta", type=float, default=0.0, help="aggregate error threshold")
    c.add_argument("--T", type=float, default=math.inf, help="reset period")
    c.add_argument("--chi-bar", type=float, default=0.0, help="bound on a dropped payload")
    return ap


def cli_main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "certify":
            if not args.kappa > 1:
                raise SpecError("kappa: must exceed 1")
            drift = 0.0 if args.chi_bar == 0 else args.T * args.chi_bar
            report = certificate_report(args.kappa, args.alpha, args.eps, args.delta + drift)
            report.update(T=args.T, chi_bar=args.chi_bar)
            _emit(report)
            return 0
        kind = None if args.command in ("run", "gen-data") else SUBCOMMAND_KIND[args.command]
        spec = _load_spec(args, kind)
        if args.command == "run":
            result = cmd_run(spec)
        elif args.command == "gen-data":
            result = cmd_gen_data(spec, args.format)
        elif args.command == "graph-run":
            result = cmd_graph(spec)
        else:
            result = STUDY[kind](spec)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return 2
    except RUN_ERRORS as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return 1
    _emit(result)
    return 0


def main() -> None:
    sys.exit(cli_main())
