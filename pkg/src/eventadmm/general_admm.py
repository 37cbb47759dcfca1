"""Event-based over-relaxed ADMM for ``min f(x) + g(z)  s.t.  Ax + Bz = c``.

Three logical nodes exchange deltas of ``r = Ax``, ``s = Bz`` and the scaled
dual ``u`` over six directed channels. Each node keeps one last-sent register,
so a triggered send goes out on both of its channels; drops are sampled per
channel. The simulator also records the exact estimation errors so that the
run can be replayed through the linear state-space model in
:mod:`eventadmm.certify`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .consensus import BoundViolation, RunFailure
from .events import (STREAM_DROP, STREAM_TRIGGER, CommLog, DropModel, TriggerPolicy,
                     make_rng, maybe_trigger)
from .objectives import Quadratic, Regularizer, prox_by_gradient, prox_gradient

CHANNELS = ("rs", "ru", "sr", "su", "ur", "us")
# order of the blocks of the error vector e_k and the node whose threshold
# bounds each block; the flag marks blocks written in the current iteration
ERROR_BLOCKS = (("rs", "r", True), ("ru", "r", True), ("su", "s", True), ("sr", "s", False),
                ("su", "s", False), ("ur", "u", False), ("us", "u", False))


@dataclass(eq=False)
class GeneralProblem:
    """Problem data. ``A`` must be square and invertible, ``B`` of full column rank."""

    f: object
    g: Regularizer
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
        rdim = self.A.shape[0]
        if self.A.shape != (rdim, rdim):
            raise ValueError("A must be square")
        if self.B.shape[0] != rdim or self.c.size != rdim:
            raise ValueError("A, B and c have inconsistent row counts")
        sv = np.linalg.svd(self.A, compute_uv=False)
        if sv[-1] <= 1e-12 * sv[0]:
            raise ValueError("A is numerically singular")
        self.sigma_max = float(sv[0])
        self.sigma_min = float(sv[-1])
        svb = np.linalg.svd(self.B, compute_uv=False)
        if self.B.shape[1] > rdim or svb[-1] <= 1e-12 * svb[0]:
            raise ValueError("B must have full column rank")
        BtB = self.B.T @ self.B
        beta = BtB[0, 0]
        self.btb_scalar = float(beta) if np.allclose(BtB, beta * np.eye(BtB.shape[0]), atol=1e-12 * beta) else None
        self._BtB = BtB
        self._A_lu = linalg.lu_factor(self.A)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.A.shape[1], self.B.shape[1], self.A.shape[0]

    @property
    def kappa(self) -> float:
        """Condition number of the scaled objective, ``L sigma_max(A)^2 / (m sigma_min(A)^2)``."""
        return self.f.L * self.sigma_max**2 / (self.f.m * self.sigma_min**2)

    def certificate_rho(self, eps: float = 0.0) -> float:
        """Step size for which the rate certificate applies."""
        return self.kappa**eps * math.sqrt(self.f.m * self.f.L) / (self.sigma_min * self.sigma_max)

    def grad_hat(self, r: np.ndarray, rho: float) -> np.ndarray:
        """Gradient of ``r -> f(A^{-1} r)/rho``."""
        x = linalg.lu_solve(self._A_lu, r)
        return linalg.lu_solve(self._A_lu, self.f.gradient(x), trans=1) / rho

    def objective(self, x, z) -> float:
        return float(self.f.value(x) + self.g.value(z))


@dataclass
class GeneralFixedPoint:
    x_star: np.ndarray
    z_star: np.ndarray
    r_star: np.ndarray
    s_star: np.ndarray
    u_star: np.ndarray
    beta_star: np.ndarray
    gamma_star: np.ndarray
    f_star: float

    @property
    def xi_star(self) -> np.ndarray:
        return np.stack([self.s_star, self.u_star])


def general_reference(problem: GeneralProblem, rho: float, tol: float = 1e-12) -> GeneralFixedPoint:
    """Solve the problem centrally by eliminating ``x = A^{-1}(c - Bz)``."""
    A, B, c, f, g = problem.A, problem.B, problem.c, problem.f, problem.g
    Ainv = np.linalg.inv(A)
    M = Ainv @ B                       # x = Ainv c - M z
    x_c = Ainv @ c
    if isinstance(f, Quadratic) and g.kind in ("zero", "quadratic"):
        H = M.T @ f.H @ M
        h = M.T @ (f.H @ x_c - f.h)
        if g.kind == "quadratic":
            H = H + g.weight * np.eye(H.shape[0])
            h = h + g.weight * np.broadcast_to(g.center, (H.shape[0],))
        z = np.linalg.solve(H, h)
    else:
        def grad(z):
            return -M.T @ f.gradient(x_c - M @ z)

        L = f.L * np.linalg.norm(M, 2) ** 2
        scale = max(1.0, float(np.linalg.norm(grad(np.zeros(B.shape[1])))))
        z, _ = prox_gradient(grad, L, g, np.zeros(B.shape[1]), tol * scale)
    x = x_c - M @ z
    r, s = A @ x, B @ z
    beta = problem.grad_hat(r, rho)
    return GeneralFixedPoint(x, z, r, s, -beta, beta, beta.copy(), problem.objective(x, z))


@dataclass(frozen=True)
class GeneralConfig:
    """Algorithm and communication parameters.

    ``policies`` maps node name (``"r"``, ``"s"``, ``"u"``) to its trigger
    policy; drops use channel names from :data:`CHANNELS`.
    """

    rho: float
    alpha: float = 1.0
    T: float = math.inf
    policies: dict = field(default_factory=lambda: {v: TriggerPolicy.vanilla(0.0) for v in "rsu"})
    drops: DropModel = field(default_factory=DropModel)
    seed: int = 0
    record_errors: bool = True
    check_bounds: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not 0 < self.alpha < 2:
            raise ValueError("alpha must lie in (0, 2)")
        if set(self.policies) != set("rsu"):
            raise ValueError("policies must cover nodes r, s and u")
        if not (self.T == math.inf or (self.T >= 1 and float(self.T).is_integer())):
            raise ValueError("reset period T must be a positive integer or inf")

    @classmethod
    def uniform(cls, rho, alpha=1.0, delta=0.0, **kw) -> "GeneralConfig":
        """Same vanilla threshold (number or schedule) on every node."""
        pol = TriggerPolicy.vanilla(delta)
        return cls(rho, alpha, policies={v: pol for v in "rsu"}, **kw)

    def reset_due(self, k: int) -> bool:
        return self.T != math.inf and (k + 1) % int(self.T) == 0


@dataclass
class TriAgentWorld:
    """True variables, every node's estimates and last-sent registers."""

    x: np.ndarray
    z: np.ndarray
    r: np.ndarray
    s: np.ndarray
    u: np.ndarray
    est: dict            # channel name -> receiver's estimate of the sender's variable
    last_sent: dict      # node -> register
    gamma: np.ndarray | None = None

    @classmethod
    def start(cls, problem: GeneralProblem, x0=None, z0=None) -> "TriAgentWorld":
        p, q, _ = problem.dims
        x = np.zeros(p) if x0 is None else np.asarray(x0, dtype=float)
        z = np.zeros(q) if z0 is None else np.asarray(z0, dtype=float)
        r, s = problem.A @ x, problem.B @ z
        u = np.zeros_like(r)
        truth = {"r": r, "s": s, "u": u}
        est = {ch: truth[ch[0]].copy() for ch in CHANNELS}
        return cls(x, z, r, s, u, est, {v: truth[v].copy() for v in "rsu"})

    def value(self, node: str) -> np.ndarray:
        return {"r": self.r, "s": self.s, "u": self.u}[node]


#%% the three updates

class _Solvers:
    """Cached linear algebra for the x- and z-updates."""

    def __init__(self, problem: GeneralProblem, rho: float):
        self.problem, self.rho = problem, rho
        A = problem.A
        self.quad = isinstance(problem.f, Quadratic)
        if self.quad:
            self.chol = linalg.cho_factor(problem.f.H + rho * A.T @ A)
        if problem.btb_scalar is None and problem.g.kind == "zero":
            self.btb_chol = linalg.cho_factor(problem._BtB)

    def x_update(self, v: np.ndarray, x0: np.ndarray) -> np.ndarray:
        """argmin_x f(x) + rho/2 |Ax + v|^2."""
        P, rho = self.problem, self.rho
        if self.quad:
            return linalg.cho_solve(self.chol, P.f.h - rho * P.A.T @ v)
        # f(x) + rho/2|Ax + v|^2 in the variable y = Ax is a prox of f o A^{-1}
        Ainv = np.linalg.inv(P.A)

        class _Pulled:
            L = P.f.L / P.sigma_min**2

            @staticmethod
            def gradient(y):
                return Ainv.T @ P.f.gradient(Ainv @ y)

        y = prox_by_gradient(_Pulled, -v, rho, P.A @ x0)
        return Ainv @ y

    def z_update(self, w: np.ndarray, z0: np.ndarray) -> np.ndarray:
        """argmin_z g(z) + rho/2 |Bz + w|^2."""
        P, rho = self.problem, self.rho
        B, g = P.B, P.g
        beta = P.btb_scalar
        if beta is not None:
            return g.prox(-B.T @ w / beta, 1.0 / (rho * beta))
        if g.kind == "zero":
            return linalg.cho_solve(self.btb_chol, -B.T @ w)
        Ls = rho * np.linalg.norm(B, 2) ** 2
        z, _ = prox_gradient(lambda z: rho * B.T @ (B @ z + w), Ls, g, z0, 1e-13 * max(1.0, Ls))
        return z


def r_step(world: TriAgentWorld, problem: GeneralProblem, solvers: _Solvers) -> TriAgentWorld:
    v = world.est["sr"] - problem.c + world.est["ur"]
    world.x = solvers.x_update(v, world.x)
    world.r = problem.A @ world.x
    return world


def s_step(world: TriAgentWorld, problem: GeneralProblem, solvers: _Solvers, alpha: float) -> TriAgentWorld:
    """Update z and s; keeps the certified subgradient of g(B^{-1} .) in ``world.gamma``."""
    w = alpha * world.est["rs"] - (1 - alpha) * world.s - alpha * problem.c + world.est["us"]
    world.z = solvers.z_update(w, world.z)
    world.s = problem.B @ world.z
    world.gamma = -(w + world.s)
    return world


def u_step(world: TriAgentWorld, alpha: float, c: np.ndarray, su_prev: np.ndarray) -> TriAgentWorld:
    world.u = world.u + alpha * world.est["ru"] - (1 - alpha) * su_prev + world.est["su"] - alpha * c
    return world


#%% run

@dataclass
class GeneralTrace:
    """Per-iteration record. ``xi[k] = (s_k, u_k)``; ``v[k]``, ``e[k]`` drive step k."""

    xi: np.ndarray
    r: np.ndarray
    v: np.ndarray
    e: np.ndarray
    e_norm: np.ndarray
    e_bound: np.ndarray
    objective: np.ndarray
    sent: np.ndarray
    load: np.ndarray
    thresholds: np.ndarray

    @property
    def horizon(self) -> int:
        return self.r.shape[0]


def _entry_bound(thr: float, T: float, chi: float) -> float:
    if chi == 0.0:
        return thr
    if T == math.inf:
        return math.inf
    return thr + T * chi


def run_general(problem: GeneralProblem, cfg: GeneralConfig, horizon: int,
                x0=None, z0=None) -> tuple[GeneralTrace, CommLog, TriAgentWorld]:
    """Run the event-based general-form algorithm for ``horizon`` iterations.

    The error vector bound asserted each step is the sum over its seven blocks
    of (threshold in force + T times the largest dropped payload on that
    channel); declared ``chi_bar`` values replace realized maxima.
    """
    world = TriAgentWorld.start(problem, x0, z0)
    solvers = _Solvers(problem, cfg.rho)
    rng_t = make_rng(cfg.seed, STREAM_TRIGGER)
    rng_d = make_rng(cfg.seed, STREAM_DROP)
    clog = CommLog(full_per_round=6)
    a, c, rho, dm = cfg.alpha, problem.c, cfg.rho, cfg.drops
    pols = cfg.policies
    rdim = problem.A.shape[0]
    H = horizon

    xi = np.empty((H + 1, 2, rdim))
    xi[0] = world.s, world.u
    r_hist = np.empty((H, rdim))
    v_hist = np.empty((H, 2, rdim))
    e_hist = np.zeros((H, 7, rdim))
    e_norm = np.zeros(H)
    e_bound = np.zeros(H)
    obj = np.empty(H)
    sent = np.zeros((H, 3), dtype=bool)
    load = np.empty(H)
    thr_hist = np.empty((H, 3))
    chi = {ch: 0.0 for ch in CHANNELS}
    prev_thr = {v: pols[v].threshold(0) for v in "rsu"}

    def transmit(node: str, k: int) -> bool:
        delta = maybe_trigger(world.value(node), world.last_sent[node], pols[node], k, rng_t)
        if delta is None:
            return False
        for ch in CHANNELS:
            if ch[0] != node:
                continue
            clog.uploads_sent += 1
            if dm.dropped(ch, rng_d):
                clog.uploads_dropped += 1
                size = clog.record_drop(ch, delta, dm.chi_bar)
                chi[ch] = max(chi[ch], size)
            else:
                world.est[ch] = world.est[ch] + delta
        return True

    for k in range(H):
        s_k, u_k = world.s, world.u
        e_old = (world.est["sr"] - s_k, world.est["su"] - s_k, world.est["ur"] - u_k, world.est["us"] - u_k)
        su_prev = world.est["su"]
        thr = {v: pols[v].threshold(k) for v in "rsu"}

        r_step(world, problem, solvers)
        sent[k, 0] = transmit("r", k)
        s_step(world, problem, solvers, a)
        sent[k, 1] = transmit("s", k)
        u_step(world, a, c, su_prev)
        e_new = (world.est["rs"] - world.r, world.est["ru"] - world.r, world.est["su"] - world.s)
        sent[k, 2] = transmit("u", k)

        if not (np.all(np.isfinite(world.u)) and np.all(np.isfinite(world.s))):
            raise RunFailure(f"non-finite iterate at iteration {k}")
        if cfg.record_errors:
            e_hist[k] = np.stack(e_new + e_old)
        bound = 0.0
        for ch, node, fresh in ERROR_BLOCKS:
            bchi = dm.chi_bar if (np.isfinite(dm.chi_bar) and dm.applies(ch)) else chi[ch]
            bound += _entry_bound(thr[node] if fresh else prev_thr[node], cfg.T, bchi)
        e_bound[k] = bound
        e_norm[k] = float(np.linalg.norm(e_hist[k]))
        if cfg.check_bounds and cfg.record_errors and e_norm[k] > bound * (1 + 1e-9) + 1e-12:
            raise BoundViolation(f"iteration {k}: |e_k| = {e_norm[k]:.6e} exceeds bound {bound:.6e}")

        r_hist[k] = world.r
        v_hist[k] = problem.grad_hat(world.r, rho), world.gamma
        obj[k] = problem.objective(world.x, world.z)
        thr_hist[k] = thr["r"], thr["s"], thr["u"]
        prev_thr = thr

        if cfg.reset_due(k):
            for ch in CHANNELS:
                world.est[ch] = world.value(ch[0]).copy()
            for node in "rsu":
                world.last_sent[node] = world.value(node).copy()
            clog.reset_messages += 6
            prev_thr = {v: 0.0 for v in "rsu"}
            chi = {ch: 0.0 for ch in CHANNELS}
        clog.rounds += 1
        xi[k + 1] = world.s, world.u
        load[k] = clog.load

    trace = GeneralTrace(xi, r_hist, v_hist, e_hist, e_norm, e_bound, obj, sent, load, thr_hist)
    return trace, clog, world
