"""Event-based over-relaxed consensus ADMM with a central server.

Agents hold ``(x, u, z_hat)`` and transmit changes of ``d = alpha*x + u``;
the server keeps a running estimate ``zeta_hat`` of the average of ``d``,
computes the consensus variable ``z`` and transmits its changes back. Lost
messages are repaired by a periodic reset that synchronizes every estimate.

The sharing-problem variant (coupling through ``g(sum_i x_i)``) lives at the
bottom of this module.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .events import (STREAM_DROP, STREAM_SOLVER, STREAM_TRIGGER, CommLog, DropModel,
                     TriggerPolicy, make_rng, maybe_trigger)
from .objectives import FixedPoint, LocalSolver, Regularizer, total_objective

log = logging.getLogger(__name__)

CSV_COLUMNS = ("k", "f_gap", "z_err_sq", "V", "zeta_err", "delta_k",
               "uploads", "downloads", "drops", "resets", "load")


class BoundViolation(AssertionError):
    """A proven error bound failed during a run."""


class RunFailure(RuntimeError):
    """Numerical breakdown during a run, with the offending iteration."""


#%% configuration and state

@dataclass(frozen=True)
class ConsensusProblem:
    locals_: Sequence
    g: Regularizer = field(default_factory=Regularizer.zero)

    @property
    def N(self) -> int:
        return len(self.locals_)

    @property
    def dim(self) -> int:
        return self.locals_[0].dim


@dataclass(frozen=True)
class ConsensusConfig:
    """Algorithm parameters.

    ``T`` is the reset period; ``math.inf`` (the default) disables resets.
    """

    rho: float = 1.0
    alpha: float = 1.0
    T: float = math.inf
    solver: LocalSolver = field(default_factory=LocalSolver)
    seed: int = 0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not 0 < self.alpha < 2:
            raise ValueError("alpha must lie in (0, 2)")
        if not (self.T == math.inf or (self.T >= 1 and float(self.T).is_integer())):
            raise ValueError("reset period T must be a positive integer or inf")

    def reset_due(self, k: int) -> bool:
        return self.T != math.inf and (k + 1) % int(self.T) == 0


@dataclass
class AgentState:
    x: np.ndarray
    u: np.ndarray
    z_hat: np.ndarray
    z_hat_prev: np.ndarray
    d_last_sent: np.ndarray


@dataclass
class ServerState:
    """Server variables; ``z_last_sent`` keeps one register per downlink."""

    z: np.ndarray
    zeta_hat: np.ndarray
    z_last_sent: np.ndarray


#%% single steps

def agent_step(state: AgentState, incoming: np.ndarray | None, f_i, cfg: ConsensusConfig,
               k: int, rng: np.random.Generator | None = None) -> tuple[AgentState, np.ndarray]:
    """One agent iteration: receive, dual update, local solve, form ``d``.

    ``incoming`` is the z-delta that survived the downlink (``None`` if nothing
    arrived). Returns the updated state and ``d = alpha*x_new + u``.
    """
    state.z_hat_prev = state.z_hat
    if incoming is not None:
        if incoming.shape != state.z_hat.shape:
            raise ValueError("incoming delta has the wrong dimension")
        state.z_hat = state.z_hat + incoming
    a = cfg.alpha
    state.u = state.u + a * state.x - state.z_hat + (1 - a) * state.z_hat_prev
    state.x = cfg.solver.solve(f_i, state.z_hat - state.u, cfg.rho, state.x, rng)
    return state, a * state.x + state.u


def server_step(state: ServerState, received: Sequence[tuple[int, np.ndarray]], g: Regularizer,
                N: int, cfg: ConsensusConfig) -> tuple[ServerState, np.ndarray]:
    """Fold received d-deltas into ``zeta_hat`` and compute the next ``z``."""
    seen = set()
    for i, delta in received:
        if i in seen:
            raise ValueError(f"agent {i} delivered twice in one round")
        seen.add(i)
        state.zeta_hat = state.zeta_hat + delta / N
    z_new = g.prox(state.zeta_hat + (1 - cfg.alpha) * state.z, 1.0 / (N * cfg.rho))
    state.z = z_new
    return state, z_new


#%% traces

@dataclass
class RunTrace:
    """Per-iteration record of a consensus run.

    Row k describes iteration k: ``z[k+1]`` and ``x[k]`` (which holds
    x_{k+1}) are its outputs, ``u[k]`` and ``V[k]`` are the dual state used in
    it, ``zeta_err[k]`` is the server's estimation error after receiving.
    """

    z: np.ndarray
    x: np.ndarray
    u: np.ndarray
    objective: np.ndarray
    f_gap: np.ndarray
    z_err_sq: np.ndarray
    V: np.ndarray
    D0: float
    zeta_err: np.ndarray
    zeta_bound: np.ndarray
    delta_k: np.ndarray
    residual_sq: np.ndarray
    grad_sq: np.ndarray
    uploads: np.ndarray
    downloads: np.ndarray
    drops: np.ndarray
    resets: np.ndarray
    load: np.ndarray
    chi_up: np.ndarray
    chi_down: np.ndarray
    sent_mask: np.ndarray
    gaps: np.ndarray

    @property
    def horizon(self) -> int:
        return self.objective.size

    def rows(self):
        for k in range(self.horizon):
            yield (k, self.f_gap[k], self.z_err_sq[k], self.V[k], self.zeta_err[k], self.delta_k[k],
                   int(self.uploads[k]), int(self.downloads[k]), int(self.drops[k]),
                   int(self.resets[k]), self.load[k])

    def to_csv(self, path) -> None:
        write_csv(path, CSV_COLUMNS, self.rows())


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


#%% the run

@dataclass
class ConsensusWorld:
    """Everything one run mutates."""

    problem: ConsensusProblem
    cfg: ConsensusConfig
    up: TriggerPolicy
    down: TriggerPolicy
    drops: DropModel
    agents: list
    server: ServerState
    pending: list
    log: CommLog
    rng_trigger: np.random.Generator
    rng_drop: np.random.Generator
    rng_solver: list
    dropped_up: np.ndarray
    d_current: np.ndarray


def init_world(problem: ConsensusProblem, cfg: ConsensusConfig, policy: TriggerPolicy,
               drops: DropModel | None = None, down_policy: TriggerPolicy | None = None,
               x0: np.ndarray | None = None) -> ConsensusWorld:
    N, n = problem.N, problem.dim
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    d0 = cfg.alpha * x0
    agents = [AgentState(x0.copy(), np.zeros(n), x0.copy(), x0.copy(), d0.copy()) for _ in range(N)]
    server = ServerState(x0.copy(), d0.copy(), np.tile(x0, (N, 1)))
    return ConsensusWorld(
        problem, cfg, policy, policy if down_policy is None else down_policy,
        drops or DropModel(), agents, server, [None] * N, CommLog(full_per_round=2 * N),
        make_rng(cfg.seed, STREAM_TRIGGER), make_rng(cfg.seed, STREAM_DROP),
        [make_rng(cfg.seed, STREAM_SOLVER, i) for i in range(N)],
        np.zeros(N), np.tile(d0, (N, 1)))


def apply_reset(world: ConsensusWorld) -> ConsensusWorld:
    """Synchronize every estimate with the true values (costs 2N messages).

    The server's estimate becomes the exact average of the agents' ``d``; each
    agent's next z-delivery is replaced by the exact correction to ``z``.
    """
    N = world.problem.N
    srv = world.server
    srv.zeta_hat = world.d_current.mean(axis=0)
    for i, ag in enumerate(world.agents):
        ag.d_last_sent = world.d_current[i].copy()
        world.pending[i] = srv.z - ag.z_hat
        srv.z_last_sent[i] = srv.z
    world.dropped_up[:] = 0.0
    world.log.reset_messages += 2 * N
    return world


def run_consensus(problem: ConsensusProblem, cfg: ConsensusConfig, policy: TriggerPolicy,
                  drops: DropModel | None = None, horizon: int = 50,
                  reference: FixedPoint | None = None, down_policy: TriggerPolicy | None = None,
                  check_bounds: bool = True, x0: np.ndarray | None = None):
    """Run the event-based consensus algorithm.

    Parameters
    ----------
    policy, down_policy : TriggerPolicy
        Upload (agent to server) and download policies; ``down_policy``
        defaults to ``policy``.
    drops : DropModel
        Channels are ``"up"`` and ``"down"``.
    reference : FixedPoint, optional
        Optimum used for gaps and Lyapunov values (NaN when absent).
    check_bounds : bool
        Assert the server-estimate error bound at every iteration.

    Returns
    -------
    trace : RunTrace
    log : CommLog
    world : ConsensusWorld
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    world = init_world(problem, cfg, policy, drops, down_policy, x0)
    N, n, H = problem.N, problem.dim, horizon
    fs, g, a, rho = problem.locals_, problem.g, cfg.alpha, cfg.rho
    up, down, dm, clog = world.up, world.down, world.drops, world.log

    z_hist = np.empty((H + 1, n))
    z_hist[0] = world.server.z
    x_hist = np.empty((H, N, n))
    u_hist = np.empty((H, N, n))
    scal = {key: np.full(H, np.nan) for key in
            ("objective", "f_gap", "z_err_sq", "V", "zeta_err", "zeta_bound", "delta_k",
             "residual_sq", "grad_sq", "load")}
    counts = {key: np.zeros(H, dtype=np.int64) for key in ("uploads", "downloads", "drops", "resets")}
    chi_up = np.zeros(N)
    chi_down = np.zeros(N)
    sent_mask = np.zeros((H, N), dtype=bool)
    gaps = np.zeros((H, N))
    chi_seen = 0.0
    D0 = np.nan
    if reference is not None:
        D0 = float(np.sum((z_hist[0] - reference.z_star) ** 2)
                   + np.mean(np.sum(reference.u_star**2, axis=1)))

    for k in range(H):
        received = []
        for i, ag in enumerate(world.agents):
            _, d_new = agent_step(ag, world.pending[i], fs[i], cfg, k, world.rng_solver[i])
            world.pending[i] = None
            world.d_current[i] = d_new
            gaps[k, i] = np.linalg.norm(d_new - ag.d_last_sent)
            delta = maybe_trigger(d_new, ag.d_last_sent, up, k, world.rng_trigger)
            if delta is None:
                continue
            sent_mask[k, i] = True
            clog.uploads_sent += 1
            if dm.dropped("up", world.rng_drop):
                clog.uploads_dropped += 1
                chi_up[i] = max(chi_up[i], clog.record_drop("up", delta, dm.chi_bar))
                world.dropped_up[i] += 1
            else:
                received.append((i, delta))
        z_prev = world.server.z
        _, z_new = server_step(world.server, received, g, N, cfg)
        zeta_used = world.server.zeta_hat
        if not np.all(np.isfinite(z_new)):
            raise RunFailure(f"non-finite consensus variable at iteration {k}")

        zeta = world.d_current.mean(axis=0)
        zeta_err = float(np.linalg.norm(world.server.zeta_hat - zeta))
        chi_seen = max(chi_seen, float(chi_up.max(initial=0.0)))
        bound = _prop1_bound(up.bound, cfg.T, dm, chi_seen)
        scal["zeta_err"][k] = zeta_err
        scal["zeta_bound"][k] = bound
        if check_bounds:
            check_prop1_bound(k, zeta_err, bound)

        for i, ag in enumerate(world.agents):
            delta = maybe_trigger(z_new, world.server.z_last_sent[i], down, k, world.rng_trigger)
            if delta is None:
                continue
            clog.downloads_sent += 1
            if dm.dropped("down", world.rng_drop):
                clog.downloads_dropped += 1
                chi_down[i] = max(chi_down[i], clog.record_drop("down", delta, dm.chi_bar))
            else:
                world.pending[i] = delta

        if cfg.reset_due(k):
            apply_reset(world)
        clog.rounds += 1

        # metrics for this iteration
        xs = np.stack([ag.x for ag in world.agents])
        us = np.stack([ag.u for ag in world.agents])
        x_hist[k], u_hist[k], z_hist[k + 1] = xs, us, z_new
        obj = total_objective(fs, g, z_new)
        scal["objective"][k] = obj
        scal["delta_k"][k] = up.threshold(k)
        resid = xs - z_new
        scal["residual_sq"][k] = float(np.mean(np.sum(resid**2, axis=1)))
        # subgradient of g certified by the z-update's optimality condition
        gamma = -N * rho * (z_new - zeta_used - (1 - a) * z_prev)
        G = (sum(f.gradient(xi) for f, xi in zip(fs, xs)) + gamma) / (rho * N)
        scal["grad_sq"][k] = float(G @ G)
        if reference is not None:
            scal["f_gap"][k] = abs(obj - reference.f_star)
            scal["z_err_sq"][k] = float(np.sum((z_new - reference.z_star) ** 2))
            scal["V"][k] = float(np.sum((z_prev - reference.z_star) ** 2)
                                 + np.mean(np.sum((us - reference.u_star) ** 2, axis=1)))
        counts["uploads"][k] = clog.uploads_sent
        counts["downloads"][k] = clog.downloads_sent
        counts["drops"][k] = clog.dropped
        counts["resets"][k] = clog.reset_messages
        scal["load"][k] = clog.load

    trace = RunTrace(z=z_hist, x=x_hist, u=u_hist, D0=D0, chi_up=chi_up, chi_down=chi_down,
                     sent_mask=sent_mask, gaps=gaps, **scal, **counts)
    return trace, clog, world


#%% bounds and metrics

def _prop1_bound(delta_bound: float, T: float, drops: DropModel, chi_seen: float) -> float:
    """Bound on |zeta_hat - zeta|: threshold plus at most T dropped payloads.

    The dropped-payload bound is the declared ``chi_bar`` when finite and the
    running maximum of realized drops otherwise. Without resets, drops make
    the bound infinite.
    """
    if not drops.applies("up"):
        return delta_bound
    chi = drops.chi_bar if np.isfinite(drops.chi_bar) else chi_seen
    if T == math.inf:
        return delta_bound if chi == 0.0 else math.inf
    return delta_bound + T * chi


def check_prop1_bound(k: int, zeta_err: float, bound: float, rtol: float = 1e-9) -> None:
    """Raise :class:`BoundViolation` if the server estimate left its error bound."""
    if zeta_err > bound + rtol * (1.0 + bound if np.isfinite(bound) else 1.0):
        raise BoundViolation(f"iteration {k}: |zeta_hat - zeta| = {zeta_err:.6e} exceeds bound {bound:.6e}")


def nonconvex_metrics(trace: RunTrace) -> np.ndarray:
    """Running averages of the stationarity measure.

    Entry K is ``1/(K+1) * sum_{k<=K} (2/3 mean_i |r_i|^2 + 1/6 |G|^2 / N)``
    with residuals ``r_i = x_i - z`` and ``G`` the gradient surrogate built from
    the z-update's optimality condition.
    """
    N = trace.x.shape[1]
    terms = (2.0 / 3.0) * trace.residual_sq + trace.grad_sq / (6.0 * N)
    return np.cumsum(terms) / np.arange(1, terms.size + 1)


def cor1_bound(k: np.ndarray, kappa: float, eps: float, D0: float, N: int, delta_c: float) -> np.ndarray:
    """Linear-rate-plus-floor bound on |z_k - z*|^2 for constant thresholds."""
    rate = 1.0 - 1.0 / (4.0 * kappa ** (eps + 0.5))
    return 4.0 * rate ** (2 * np.asarray(k)) * D0 + (5.0 / N) * kappa ** (2 + 2 * eps) * delta_c**2


#%% sharing problem

@dataclass
class SharingTrace:
    x: np.ndarray
    objective: np.ndarray
    h: np.ndarray
    uploads: np.ndarray
    downloads: np.ndarray


def sharing_objective(locals_, g: Regularizer, xs: np.ndarray) -> float:
    return float(sum(f.value(xi) for f, xi in zip(locals_, xs)) + g.value(xs.sum(axis=0)))


def sharing_run(problem: ConsensusProblem, cfg: ConsensusConfig, policy: TriggerPolicy,
                drops: DropModel | None = None, horizon: int = 100,
                down_policy: TriggerPolicy | None = None) -> tuple[SharingTrace, CommLog]:
    """Event-based ADMM for ``min sum_i f_i(x_i) + g(sum_i x_i)``.

    Agents minimize ``f_i(x) + rho/2 |x - x_i + h_hat|^2`` and transmit changes
    of ``x_i``; the server averages its estimates, updates ``(z, u)`` and
    transmits changes of ``h = x_bar - z + u/rho``. ``u`` is unscaled here.
    """
    dm = drops or DropModel()
    down = policy if down_policy is None else down_policy
    N, n, rho = problem.N, problem.dim, cfg.rho
    fs, g = problem.locals_, problem.g
    rng_t = make_rng(cfg.seed, STREAM_TRIGGER)
    rng_d = make_rng(cfg.seed, STREAM_DROP)
    rng_s = [make_rng(cfg.seed, STREAM_SOLVER, i) for i in range(N)]
    clog = CommLog(full_per_round=2 * N)

    x = np.zeros((N, n))
    x_sent = np.zeros((N, n))
    x_est = np.zeros((N, n))      # server copies of the agents' x
    h_hat = np.zeros((N, n))      # agent copies of h
    h_sent = np.zeros((N, n))
    u = np.zeros(n)
    h = np.zeros(n)

    xs_hist = np.empty((horizon, N, n))
    obj = np.empty(horizon)
    h_hist = np.empty((horizon, n))
    ups = np.zeros(horizon, dtype=np.int64)
    downs = np.zeros(horizon, dtype=np.int64)
    for k in range(horizon):
        for i in range(N):
            x[i] = cfg.solver.solve(fs[i], x[i] - h_hat[i], rho, x[i], rng_s[i])
            delta = maybe_trigger(x[i], x_sent[i], policy, k, rng_t)
            if delta is None:
                continue
            clog.uploads_sent += 1
            if dm.dropped("up", rng_d):
                clog.uploads_dropped += 1
                clog.record_drop("up", delta, dm.chi_bar)
            else:
                x_est[i] += delta
        x_bar = x_est.mean(axis=0)
        z = g.scaled_prox(x_bar + u / rho, 1.0 / (N * rho), N)
        u = u + rho * (x_bar - z)
        h = x_bar - z + u / rho
        for i in range(N):
            delta = maybe_trigger(h, h_sent[i], down, k, rng_t)
            if delta is None:
                continue
            clog.downloads_sent += 1
            if dm.dropped("down", rng_d):
                clog.downloads_dropped += 1
                clog.record_drop("down", delta, dm.chi_bar)
            else:
                h_hat[i] += delta
        if cfg.reset_due(k):
            x_est[:] = x
            x_sent[:] = x
            h_hat[:] = h
            h_sent[:] = h
            clog.reset_messages += 2 * N
        clog.rounds += 1
        xs_hist[k] = x
        obj[k] = sharing_objective(fs, g, x)
        h_hist[k] = h
        ups[k], downs[k] = clog.uploads_sent, clog.downloads_sent
    return SharingTrace(xs_hist, obj, h_hist, ups, downs), clog


#%% dropped-payload bounds for a ball constraint

def ball_drop_bounds(problem: ConsensusProblem, cfg: ConsensusConfig, radius: float) -> dict:
    """A priori bounds on dropped payloads when ``g`` is the indicator of a ball.

    The consensus variable stays in the ball, so a dropped z-delta is at most
    ``2R``. A dropped d-delta of agent i is bounded through the regularized
    local minimizer ``x_reg = argmin f_i(x) + rho/2 |x|^2``; ``d_stated`` is the
    published form ``(alpha+1)(2(rho+L)/rho |x_reg| + 2R)`` and ``d_tight``
    the half-size value its derivation actually yields.
    """
    a, rho = cfg.alpha, cfg.rho
    x_reg = np.array([np.linalg.norm(f.prox(np.zeros(problem.dim), rho)) for f in problem.locals_])
    L = np.array([f.L for f in problem.locals_])
    stated = (a + 1) * (2 * (rho + L) / rho * x_reg + 2 * radius)
    return {"z": 2.0 * radius, "d_stated": stated, "d_tight": 0.5 * stated, "x_reg": x_reg}
