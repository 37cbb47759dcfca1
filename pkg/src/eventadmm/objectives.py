"""Local objectives, regularizers, local solvers and centralized reference solutions.

Every local objective exposes ``value``, ``gradient``, the constants ``L`` and
``m`` and a ``prox(anchor, rho, x0)`` method returning

    argmin_x f(x) + rho/2 |x - anchor|^2 .

Quadratic objectives solve this in closed form with a cached Cholesky factor;
other smooth objectives fall back to an inner solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import linalg


class ConvergenceError(RuntimeError):
    """Raised when an iterative reference solver misses its tolerance."""


#%% proximal operators

def prox_l1(v: np.ndarray, threshold: float) -> np.ndarray:
    """Soft threshold, the proximal operator of ``threshold * |.|_1``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)


def project_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the ball of the given radius centered at 0."""
    v = np.asarray(v, dtype=float)
    nrm = np.linalg.norm(v)
    if nrm <= radius:
        return v.copy()
    return v * (radius / nrm)


@dataclass(frozen=True)
class Regularizer:
    """The nonsmooth term g.

    Parameters
    ----------
    kind : {"zero", "l1", "ball", "quadratic"}
        ``l1`` is ``lam * |z|_1``, ``ball`` is the indicator of ``|z| <= radius``
        and ``quadratic`` is ``weight/2 |z - center|^2`` (used as a soft
        coupling constraint in the sharing problem).
    """

    kind: str = "zero"
    lam: float = 0.0
    radius: float = np.inf
    weight: float = 0.0
    center: np.ndarray | float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "l1", "ball", "quadratic"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.kind == "l1" and self.lam < 0:
            raise ValueError("l1 weight must be nonnegative")
        if self.kind == "ball" and not self.radius > 0:
            raise ValueError("ball radius must be positive")
        if self.kind == "quadratic" and self.weight < 0:
            raise ValueError("quadratic weight must be nonnegative")

    @classmethod
    def zero(cls) -> "Regularizer":
        return cls("zero")

    @classmethod
    def l1(cls, lam: float) -> "Regularizer":
        return cls("l1", lam=float(lam))

    @classmethod
    def ball(cls, radius: float) -> "Regularizer":
        return cls("ball", radius=float(radius))

    @classmethod
    def quadratic(cls, weight: float, center=0.0) -> "Regularizer":
        return cls("quadratic", weight=float(weight), center=center)

    def value(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float)
        if self.kind == "zero":
            return 0.0
        if self.kind == "l1":
            return self.lam * float(np.abs(z).sum())
        if self.kind == "ball":
            return 0.0 if np.linalg.norm(z) <= self.radius * (1 + 1e-12) else np.inf
        return 0.5 * self.weight * float(np.sum((z - self.center) ** 2))

    def prox(self, v: np.ndarray, t: float) -> np.ndarray:
        """Return ``argmin_z g(z) + 1/(2t) |z - v|^2``."""
        v = np.asarray(v, dtype=float)
        if self.kind == "zero":
            return v.copy()
        if self.kind == "l1":
            return prox_l1(v, self.lam * t)
        if self.kind == "ball":
            return project_ball(v, self.radius)
        return (v + t * self.weight * self.center) / (1.0 + t * self.weight)

    def scaled_prox(self, v: np.ndarray, t: float, scale: float) -> np.ndarray:
        """Return ``argmin_z g(scale*z) + 1/(2t) |z - v|^2``."""
        return self.prox(scale * np.asarray(v, dtype=float), scale**2 * t) / scale

    def in_subdifferential(self, z: np.ndarray, gamma: np.ndarray, tol: float = 1e-8) -> bool:
        """Check ``gamma`` is a subgradient of g at ``z`` up to ``tol``."""
        z = np.asarray(z, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        scale = tol * (1.0 + np.abs(gamma).max(initial=0.0))
        if self.kind == "zero":
            return bool(np.all(np.abs(gamma) <= scale))
        if self.kind == "quadratic":
            return bool(np.allclose(gamma, self.weight * (z - self.center), atol=scale))
        if self.kind == "l1":
            on = np.abs(z) > tol
            ok_on = np.abs(gamma[on] - self.lam * np.sign(z[on])) <= scale
            ok_off = np.abs(gamma[~on]) <= self.lam + scale
            return bool(ok_on.all() and ok_off.all())
        nz = np.linalg.norm(z)
        if nz < self.radius * (1 - 1e-9):
            return bool(np.linalg.norm(gamma) <= scale)
        # normal cone at the boundary: gamma = c * z with c >= 0
        resid = gamma - (gamma @ z) / nz**2 * z
        return bool(gamma @ z >= -scale and np.linalg.norm(resid) <= scale)


#%% local objectives

class SmoothOracle(Protocol):
    """Interface shared by all local objectives."""

    L: float
    m: float

    def value(self, x: np.ndarray) -> float: ...

    def gradient(self, x: np.ndarray) -> np.ndarray: ...

    def prox(self, anchor: np.ndarray, rho: float, x0: np.ndarray | None = None) -> np.ndarray: ...


@dataclass(eq=False)
class Quadratic:
    """f(x) = 1/2 x'Hx - h'x + const with H symmetric positive semidefinite."""

    H: np.ndarray
    h: np.ndarray
    const: float = 0.0
    _factors: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.h = np.atleast_1d(np.asarray(self.h, dtype=float))
        if self.H.shape != (self.h.size, self.h.size):
            raise ValueError("H and h have inconsistent shapes")
        self.H = 0.5 * (self.H + self.H.T)
        eigs = np.linalg.eigvalsh(self.H)
        self.L = float(max(eigs[-1], 0.0))
        self.m = float(max(eigs[0], 0.0))

    @property
    def dim(self) -> int:
        return self.h.size

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x - self.h @ x + self.const)

    def gradient(self, x):
        return self.H @ np.asarray(x, dtype=float) - self.h

    def hessian(self, x=None):
        return self.H

    def _factor(self, rho: float):
        key = float(rho)
        if key not in self._factors:
            self._factors[key] = linalg.cho_factor(self.H + rho * np.eye(self.dim))
        return self._factors[key]

    def prox(self, anchor, rho, x0=None):
        if rho <= 0:
            raise ValueError("rho must be positive")
        return linalg.cho_solve(self._factor(rho), self.h + rho * np.asarray(anchor, dtype=float))


class QuadraticLocal(Quadratic):
    """Least-squares objective f(x) = 1/2 |A x - b|^2.

    Parameters
    ----------
    design_matrix : (m_i, n) array
    targets : (m_i,) array
    """

    def __init__(self, design_matrix, targets):
        A = np.atleast_2d(np.asarray(design_matrix, dtype=float))
        b = np.atleast_1d(np.asarray(targets, dtype=float))
        if A.shape[0] != b.size:
            raise ValueError("design_matrix and targets have different row counts")
        self.A = A
        self.b = b
        super().__init__(A.T @ A, A.T @ b, 0.5 * float(b @ b))

    def __repr__(self):
        return f"QuadraticLocal(rows={self.A.shape[0]}, n={self.A.shape[1]})"

    def value(self, x):
        r = self.A @ np.asarray(x, dtype=float) - self.b
        return 0.5 * float(r @ r)

    def minibatch_gradient(self, x, rng: np.random.Generator, batch: int) -> np.ndarray:
        """Unbiased gradient estimate from ``batch`` rows sampled without replacement."""
        rows = self.A.shape[0]
        if batch >= rows:
            return self.gradient(x)
        idx = rng.choice(rows, size=batch, replace=False)
        Ab = self.A[idx]
        return (rows / batch) * Ab.T @ (Ab @ x - self.b[idx])


@dataclass(eq=False)
class SinusoidalLocal:
    """Separable nonconvex objective.

    f(x) = a/2 |x - c|^2 + beta * sum_j sin(omega * x_j + phase_j)

    The curvature lies in ``[a - beta*omega^2, a + beta*omega^2]``; the
    proximal subproblem is strongly convex once ``a + rho > beta*omega^2``.
    """

    a: float
    c: np.ndarray
    beta: float
    omega: float
    phase: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.phase = np.broadcast_to(np.asarray(self.phase, dtype=float), self.c.shape).copy()
        bend = self.beta * self.omega**2
        self.L = float(self.a + bend)
        self.m = float(max(self.a - bend, 0.0))

    @property
    def dim(self) -> int:
        return self.c.size

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * self.a * np.sum((x - self.c) ** 2)
                     + self.beta * np.sum(np.sin(self.omega * x + self.phase)))

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return self.a * (x - self.c) + self.beta * self.omega * np.cos(self.omega * x + self.phase)

    def prox(self, anchor, rho, x0=None):
        curv = self.a + rho
        if curv <= self.beta * self.omega**2:
            raise ValueError("rho too small: proximal subproblem is not strongly convex")
        anchor = np.asarray(anchor, dtype=float)
        base = (self.a * self.c + rho * anchor) / curv
        spread = self.beta * self.omega / curv
        lo, hi = base - spread, base + spread
        x = np.clip(base if x0 is None else np.asarray(x0, dtype=float), lo, hi)
        # safeguarded Newton on the strictly increasing scalar derivative
        rhs = self.a * self.c + rho * anchor
        tol = 4e-16 * (1.0 + np.abs(rhs) + curv * np.abs(hi) + self.beta * self.omega)
        for _ in range(100):
            arg = self.omega * x + self.phase
            d = curv * x - rhs + self.beta * self.omega * np.cos(arg)
            if np.all(np.abs(d) <= tol):
                break
            lo = np.where(d > 0, lo, x)
            hi = np.where(d > 0, x, hi)
            dd = curv - self.beta * self.omega**2 * np.sin(arg)
            step = x - d / dd
            bad = (step < lo) | (step > hi)
            x = np.where(bad, 0.5 * (lo + hi), step)
        return x


#%% local solvers

def solve_local_exact(f_i, anchor: np.ndarray, rho: float, x0: np.ndarray | None = None) -> np.ndarray:
    """Return ``argmin_x f_i(x) + rho/2 |x - anchor|^2``."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    return f_i.prox(anchor, rho, x0)


def solve_local_inexact(f_i, anchor, rho, x0, steps: int, lr: float,
                        batch: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Run ``steps`` (stochastic) gradient steps on f_i + rho/2|x - anchor|^2 from ``x0``.

    With ``batch`` set, ``f_i`` must offer ``minibatch_gradient`` and ``rng`` is required.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    anchor = np.asarray(anchor, dtype=float)
    x = np.array(x0, dtype=float, copy=True)
    for _ in range(steps):
        if batch is None:
            g = f_i.gradient(x)
        else:
            if rng is None:
                raise ValueError("stochastic steps need a generator")
            g = f_i.minibatch_gradient(x, rng, batch)
        x = x - lr * (g + rho * (x - anchor))
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("inexact local solve diverged")
    return x


@dataclass(frozen=True)
class LocalSolver:
    """How agents solve their subproblem: ``exact`` or ``inexact`` gradient steps."""

    mode: str = "exact"
    steps: int = 10
    lr: float = 0.1
    batch: int | None = None

    def __post_init__(self):
        if self.mode not in ("exact", "inexact"):
            raise ValueError(f"unknown solver mode {self.mode!r}")

    def solve(self, f_i, anchor, rho, x0, rng=None):
        if self.mode == "exact":
            return solve_local_exact(f_i, anchor, rho, x0)
        return solve_local_inexact(f_i, anchor, rho, x0, self.steps, self.lr, self.batch, rng)


def prox_by_gradient(f_i, anchor, rho, x0=None, tol=1e-12, max_iter=100_000) -> np.ndarray:
    """Proximal step of a smooth convex ``f_i`` by plain gradient descent (oracle/fallback)."""
    anchor = np.asarray(anchor, dtype=float)
    x = anchor.copy() if x0 is None else np.array(x0, dtype=float)
    step = 1.0 / (f_i.L + rho)
    for _ in range(max_iter):
        g = f_i.gradient(x) + rho * (x - anchor)
        if np.linalg.norm(g) <= tol * (1 + np.linalg.norm(x)):
            return x
        x = x - step * g
    raise ConvergenceError("gradient prox did not converge")


#%% centralized reference

@dataclass
class FixedPoint:
    """Optimum of a consensus problem together with consistent optimal duals."""

    z_star: np.ndarray
    x_star: np.ndarray
    u_star: np.ndarray
    f_star: float
    kkt_residual: float = 0.0


def total_objective(locals_: Sequence, g: Regularizer, z: np.ndarray) -> float:
    return float(sum(f.value(z) for f in locals_) + g.value(z))


def prox_gradient(grad, L, g: Regularizer, x0, tol, max_iter=200_000):
    """FISTA with restart; stops on the fixed-point (KKT) residual."""
    x = np.array(x0, dtype=float)
    y = x.copy()
    t = 1.0
    step = 1.0 / L
    for _ in range(max_iter):
        x_new = g.prox(y - step * grad(y), step)
        resid = L * np.linalg.norm(x_new - g.prox(x_new - step * grad(x_new), step))
        if resid <= tol:
            return x_new, resid
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        if (y - x_new) @ (x_new - x) > 0:  # gradient restart
            t_new = 1.0
            y = x_new.copy()
        else:
            y = x_new + (t - 1) / t_new * (x_new - x)
        x, t = x_new, t_new
    raise ConvergenceError(f"proximal gradient stopped at KKT residual {resid:.3e}")


def reference_solution(locals_: Sequence, g: Regularizer, rho: float = 1.0,
                       tol: float = 1e-11, max_iter: int = 200_000) -> FixedPoint:
    """Centralized minimizer of ``sum_i f_i(z) + g(z)`` and the matching consensus duals.

    Quadratic problems with ``g`` zero (or quadratic) are solved through the
    normal equations using a pseudoinverse; otherwise accelerated proximal
    gradient runs until the KKT residual is below ``tol`` (relative to the
    gradient scale). Duals are ``u_i = -grad f_i(z)/rho``.
    """
    N = len(locals_)
    quad = all(isinstance(f, Quadratic) for f in locals_)
    if quad:
        H = sum(f.H for f in locals_)
        h = sum(f.h for f in locals_)
    if quad and g.kind in ("zero", "quadratic"):
        if g.kind == "quadratic":
            H = H + g.weight * np.eye(h.size)
            h = h + g.weight * np.broadcast_to(g.center, h.shape)
        z = np.linalg.pinv(H) @ h
        resid = float(np.linalg.norm(H @ z - h))
    else:
        def grad(x):
            return sum(f.gradient(x) for f in locals_)

        L = sum(f.L for f in locals_)
        dim = locals_[0].dim
        scale = max(1.0, float(np.linalg.norm(grad(np.zeros(dim)))))
        z, resid = prox_gradient(grad, L, g, np.zeros(dim), tol * scale, max_iter)
    x_star = np.tile(z, (N, 1))
    u_star = np.stack([-f.gradient(z) / rho for f in locals_])
    return FixedPoint(z, x_star, u_star, total_objective(locals_, g, z), resid)


def lasso_coordinate_descent(locals_: Sequence[Quadratic], lam: float, tol: float = 1e-13,
                             max_sweeps: int = 100_000) -> np.ndarray:
    """Cyclic coordinate descent for ``sum_i f_i(z) + lam |z|_1`` (independent oracle)."""
    H = sum(f.H for f in locals_)
    h = sum(f.h for f in locals_)
    z = np.zeros(h.size)
    grad = -h.copy()
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(h.size):
            old = z[j]
            rho_j = H[j, j] * old - grad[j]
            new = np.sign(rho_j) * max(abs(rho_j) - lam, 0.0) / H[j, j]
            if new != old:
                grad += H[:, j] * (new - old)
                z[j] = new
                biggest = max(biggest, abs(new - old))
        if biggest <= tol * (1 + np.abs(z).max()):
            return z
    raise ConvergenceError("coordinate descent did not converge")
