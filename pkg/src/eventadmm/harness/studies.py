"""Experiment drivers: trade-off sweeps, drop/reset study, decaying thresholds,
nonconvex stationarity, graph policy comparison and certificate grids."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..certify import build_certificate, certificate_report, compute_Q, diminishing_bound
from ..consensus import (BoundViolation, ConsensusConfig, ConsensusProblem, RunFailure, RunTrace,
                         nonconvex_metrics, run_consensus, write_csv)
from ..events import DropBoundExceeded, DropModel, ThresholdSchedule, TriggerPolicy
from ..general_admm import GeneralConfig, general_reference, run_general
from ..graph import AgentGraph, GraphConfig, run_graph
from ..objectives import ConvergenceError, Regularizer, reference_solution
from .data import gen_general_instance, gen_noniid_regression, gen_nonconvex_toy
from .spec import ExperimentSpec

log = logging.getLogger(__name__)

RUN_ERRORS = (BoundViolation, RunFailure, ConvergenceError, DropBoundExceeded, FloatingPointError)
SWEEP_COLUMNS = ("delta", "p_trig", "seed", "f_gap", "rel_gap", "z_err_sq", "load",
                 "uploads", "downloads", "drops", "failed")


def _regularizer(spec: ExperimentSpec) -> Regularizer:
    return Regularizer.l1(spec.lam) if spec.lam > 0 else Regularizer.zero()


def consensus_instance(spec: ExperimentSpec, seed: int):
    """Regression/LASSO problem of ``spec`` for one seed, with its reference optimum."""
    locs = gen_noniid_regression(spec.N, spec.rows_per_agent, spec.n, seed)
    g = _regularizer(spec)
    return ConsensusProblem(locs, g), reference_solution(locs, g, spec.rho)


def _policies(spec: ExperimentSpec, delta) -> tuple[TriggerPolicy, TriggerPolicy]:
    if spec.p_trig > 0:
        up = TriggerPolicy.randomized(delta, spec.p_trig)
    else:
        up = TriggerPolicy.vanilla(delta)
    dz = delta.delta0 * spec.delta_z_ratio if isinstance(delta, ThresholdSchedule) else delta * spec.delta_z_ratio
    down = TriggerPolicy.randomized(dz, spec.p_trig) if spec.p_trig > 0 else TriggerPolicy.vanilla(dz)
    return up, down


#%% trade-off sweep

@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        write_csv(path, SWEEP_COLUMNS, self.rows)

    def column(self, name: str) -> np.ndarray:
        j = SWEEP_COLUMNS.index(name)
        return np.array([r[j] for r in self.rows], dtype=float)


def _sweep_point(args) -> tuple:
    spec_dict, delta, seed = args
    spec = ExperimentSpec.from_dict(spec_dict)
    try:
        prob, ref = consensus_instance(spec, seed)
        up, down = _policies(spec, delta)
        cfg = ConsensusConfig(rho=spec.rho, alpha=spec.alpha, T=spec.T, seed=seed)
        drops = DropModel(spec.p_drop, tuple(spec.drop_channels))
        tr, clog, _ = run_consensus(prob, cfg, up, drops, spec.horizon, ref, down_policy=down)
        return (float(delta), spec.p_trig, seed, float(tr.f_gap[-1]), float(tr.f_gap[-1] / abs(ref.f_star)),
                float(tr.z_err_sq[-1]), float(clog.load), clog.uploads_sent, clog.downloads_sent,
                clog.dropped, 0)
    except RUN_ERRORS as exc:
        log.warning("sweep point delta=%g seed=%d failed: %s", delta, seed, exc)
        nan = float("nan")
        return (float(delta), spec.p_trig, seed, nan, nan, nan, nan, 0, 0, 0, 1)


def run_tradeoff_sweep(spec: ExperimentSpec) -> SweepResult:
    """One row per (threshold, seed), ordered by threshold then seed."""
    jobs = [(spec.to_dict(), float(d), int(s)) for d in spec.deltas for s in spec.seeds]
    if spec.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    return SweepResult(rows)


def best_savings(result: SweepResult, seed: int, max_rel_increase: float = 0.01) -> tuple[float, float]:
    """Largest message saving versus the zero-threshold row whose relative gap
    grows by at most ``max_rel_increase``; returns ``(saving, delta)``."""
    rows = [r for r in result.rows if r[2] == seed and not r[-1]]
    base = [r for r in rows if r[0] == 0.0]
    if not base:
        raise ValueError("sweep has no zero-threshold row for this seed")
    b = base[0]
    b_msgs = b[7] + b[8]
    best = (0.0, 0.0)
    for r in rows:
        if r[4] - b[4] <= max_rel_increase:
            saving = 1.0 - (r[7] + r[8]) / b_msgs
            if saving > best[0]:
                best = (saving, r[0])
    return best


#%% drop / reset study

def run_drop_study(spec: ExperimentSpec, seed: int | None = None,
                   out_dir: str | Path | None = None) -> dict:
    """Runs every reset period in ``spec.resets`` with the same drop pattern seed.

    Returns ``{T: (trace, log)}``; with ``out_dir`` one CSV per period is written.
    """
    seed = spec.seeds[0] if seed is None else seed
    prob, ref = consensus_instance(spec, seed)
    delta = spec.deltas[0]
    up, down = _policies(spec, delta)
    drops = DropModel(spec.p_drop, tuple(spec.drop_channels))
    out = {}
    for T in spec.resets:
        cfg = ConsensusConfig(rho=spec.rho, alpha=spec.alpha, T=T, seed=seed)
        tr, clog, _ = run_consensus(prob, cfg, up, drops, spec.horizon, ref, down_policy=down)
        out[T] = (tr, clog)
        if out_dir is not None:
            tr.to_csv(Path(out_dir) / f"drop_T{'inf' if T == math.inf else int(T)}_seed{seed}.csv")
    return out


#%% decaying thresholds

@dataclass
class DecayReport:
    t: float
    errors: np.ndarray
    bound: np.ndarray
    slope: float
    dominated: bool
    q: float
    load: float

    def rows(self):
        for k, (e, b) in enumerate(zip(self.errors, self.bound)):
            yield k, e, b


def fit_slope(k: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of ``log y`` against ``log k`` (positive entries only)."""
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (k > 0) & (y > 0)
    return float(np.polyfit(np.log(k[ok]), np.log(y[ok]), 1)[0])


def run_decay_study(spec: ExperimentSpec, seed: int | None = None, ts=None) -> dict:
    """General-form runs with per-node thresholds ``delta0/(k+1)^(t/2)``.

    The squared error bound then decays like ``1/(k+1)^t``. For each ``t``
    the squared state error, the matching diminishing-threshold bound curve
    and the tail slope are reported; ``t = 0`` runs a constant threshold.
    """
    seed = spec.seeds[0] if seed is None else seed
    prob = gen_general_instance(spec.p, spec.kappa, seed)
    rho = prob.certificate_rho(spec.eps)
    cert = build_certificate(prob.kappa, spec.eps, spec.alpha)
    _, lam, _ = compute_Q(cert)
    ref = general_reference(prob, rho)
    H = spec.horizon
    k = np.arange(H + 1)
    out = {}
    for t in (spec.decay_t if ts is None else ts):
        sched = ThresholdSchedule.power_decay(spec.delta0, t / 2) if t > 0 else ThresholdSchedule.constant(spec.delta0)
        cfg = GeneralConfig.uniform(rho, spec.alpha, sched, seed=seed)
        tr, clog, _ = run_general(prob, cfg, H)
        err = np.sum((tr.xi - ref.xi_star) ** 2, axis=(1, 2))
        if t > 0:
            q = float(np.max((np.arange(H) + 1.0) ** t * tr.e_bound**2))
            bound = diminishing_bound(cert.tau, lam, q, t, cert.P, err[0], k)
        else:
            q = float(np.max(tr.e_bound) ** 2)
            bound = np.full(H + 1, np.nan)
        tail = k >= max(H // 10, 1)
        out[t] = DecayReport(t, err, bound, fit_slope(k[tail], err[tail]),
                             bool(t == 0 or np.all(err <= bound * (1 + 1e-9))), q, clog.load)
    return out


#%% nonconvex stationarity

@dataclass
class NonconvexReport:
    metric: np.ndarray
    metric_exact: np.ndarray
    slope: float
    slope_exact: float
    load: float

    def rows(self):
        for K, (a, b) in enumerate(zip(self.metric, self.metric_exact)):
            yield K, a, b


def run_nonconvex_study(spec: ExperimentSpec, seed: int | None = None, K_min: int = 100) -> NonconvexReport:
    """Ripple-perturbed quadratics with an l1 term, thresholds ``delta0/(k+1)^2``.

    The running average of the residual-plus-gradient measure is fitted on
    ``K >= K_min``; the same problem with zero threshold is the reference.
    """
    seed = spec.seeds[0] if seed is None else seed
    prob = ConsensusProblem(gen_nonconvex_toy(spec.N, spec.n, seed), _regularizer(spec))
    res = []
    for d0 in (spec.delta0, 0.0):
        sched = ThresholdSchedule.power_decay(d0, 2.0)
        cfg = ConsensusConfig(rho=spec.rho, alpha=1.0, seed=seed)
        tr, clog, _ = run_consensus(prob, cfg, TriggerPolicy.vanilla(sched), horizon=spec.horizon)
        res.append((nonconvex_metrics(tr), clog.load))
    K = np.arange(1, spec.horizon + 1)
    sel = K >= K_min
    (m, load), (m0, _) = res
    return NonconvexReport(m, m0, fit_slope(K[sel], m[sel]), fit_slope(K[sel], m0[sel]), load)


#%% graph policy comparison

GRAPH_COLUMNS = ("seed", "policy", "parameter", "messages_to_target", "final_f_gap", "load")


def graph_instance(spec: ExperimentSpec, seed: int):
    locs = gen_noniid_regression(spec.N, spec.rows_per_agent, spec.n, seed)
    if spec.graph_file:
        graph = AgentGraph.from_edge_list(spec.graph_file, spec.N)
    else:
        graph = AgentGraph.random_connected(spec.N, spec.n_edges, seed)
    return locs, graph, reference_solution(locs, Regularizer.zero(), spec.rho)


def run_graph_study(spec: ExperimentSpec, seed: int | None = None) -> list[tuple]:
    """Messages needed to reach ``spec.target_gap`` for every policy setting.

    Vanilla and randomized triggering sweep ``spec.deltas`` (randomized uses
    ``p_trig`` or 0.1 when unset); random selection sweeps ``spec.random_p``.
    """
    seed = spec.seeds[0] if seed is None else seed
    locs, graph, ref = graph_instance(spec, seed)
    p_rand = spec.p_trig if spec.p_trig > 0 else 0.1
    settings = ([("vanilla", d, TriggerPolicy.vanilla(d)) for d in spec.deltas]
                + [("randomized", d, TriggerPolicy.randomized(d, p_rand)) for d in spec.deltas]
                + [("random_only", p, TriggerPolicy.random_only(p)) for p in spec.random_p])
    rows = []
    drops = DropModel(spec.p_drop, ("edge",))
    for name, param, pol in settings:
        cfg = GraphConfig(rho=spec.rho, T=spec.T, seed=seed)
        tr, clog = run_graph(locs, graph, cfg, pol, drops, spec.horizon, ref)
        rows.append((seed, name, float(param), tr.messages_to_reach(spec.target_gap),
                     float(tr.f_gap[-1]), float(clog.load)))
    return rows


def best_per_policy(rows) -> dict:
    best = {}
    for _, name, _, msgs, _, _ in rows:
        best[name] = min(best.get(name, math.inf), msgs)
    return best


#%% certificate grid

def run_certify_grid(kappas=(1e2, 1e3, 1e4, 1e5), epss=(0.0, 0.5), alphas=(0.8, 1.0, 1.2, 1.5),
                     delta: float = 0.0) -> list[dict]:
    return [certificate_report(k, a, e, delta) for k in kappas for e in epss for a in alphas]


def trace_summary(tr: RunTrace, clog) -> dict:
    return {"final_f_gap": float(tr.f_gap[-1]), "final_z_err_sq": float(tr.z_err_sq[-1]),
            "load": float(clog.load), "load_with_resets": float(clog.load_with_resets),
            "uploads": clog.uploads_sent, "downloads": clog.downloads_sent, "drops": clog.dropped}
