"""Synthetic problem generators.

The regression generator draws features from three different distributions
and hands out contiguous shards, so agents see differently distributed data
and their local minimizers lie far apart.
"""
from __future__ import annotations

import numpy as np

from ..events import STREAM_DATA, make_rng
from ..general_admm import GeneralProblem
from ..objectives import Quadratic, QuadraticLocal, Regularizer, SinusoidalLocal

FAMILIES = ("normal", "student_t1", "uniform5")


def _draw(family: str, rng: np.random.Generator, size) -> np.ndarray:
    if family == "normal":
        return rng.standard_normal(size)
    if family == "student_t1":
        return rng.standard_t(1.0, size)
    return rng.uniform(-5.0, 5.0, size)


def _normalize(X: np.ndarray, y: np.ndarray):
    """Center columns and targets and scale each to unit Euclidean norm."""
    X = X - X.mean(axis=0)
    y = y - y.mean()
    sx = np.linalg.norm(X, axis=0)
    sy = np.linalg.norm(y)
    if np.any(sx <= 1e-12 * np.sqrt(len(y))) or sy <= 1e-12:
        return None
    return X / sx, y / sy


def gen_noniid_regression(N: int, rows_per_agent: int, n: int, seed: int,
                          noise: float = 0.1, sparsity: float = 0.2,
                          max_retries: int = 100) -> list[QuadraticLocal]:
    """Non-i.i.d. least-squares shards ``f_i(x) = 1/2 |A_i x - b_i|^2``.

    Three equal blocks of samples (standard normal, Student-t with one degree
    of freedom, uniform on [-5, 5]) share one ground-truth vector; each
    block's target noise comes from its own family scaled by ``noise``. The
    concatenated rows are split contiguously into ``N`` shards and every shard
    is standardized (centered, unit-norm columns and targets). A shard with a
    constant column is redrawn with the next sub-seed.
    """
    if N < 2:
        raise ValueError("need at least two agents")
    if rows_per_agent < 2 or n < 1:
        raise ValueError("need rows_per_agent >= 2 and n >= 1")
    rng = make_rng(seed, STREAM_DATA)
    w = rng.standard_normal(n)
    w[rng.random(n) < sparsity] = 0.0
    total = N * rows_per_agent
    sizes = [total // 3 + (b < total % 3) for b in range(3)]
    fam_of_row = np.repeat(np.arange(3), sizes)
    shards = []
    for i in range(N):
        fams = fam_of_row[i * rows_per_agent:(i + 1) * rows_per_agent]
        for attempt in range(max_retries):
            sub = make_rng(seed, STREAM_DATA, i, attempt)
            X = np.empty((rows_per_agent, n))
            y = np.empty(rows_per_agent)
            for f in np.unique(fams):
                rows = fams == f
                X[rows] = _draw(FAMILIES[f], sub, (rows.sum(), n))
                y[rows] = X[rows] @ w + noise * _draw(FAMILIES[f], sub, rows.sum())
            normed = _normalize(X, y)
            if normed is not None:
                shards.append(QuadraticLocal(*normed))
                break
        else:
            raise RuntimeError(f"shard {i} stayed degenerate after {max_retries} redraws")
    return shards


def local_minimizers(locals_) -> np.ndarray:
    """Minimum-norm minimizer of every shard."""
    return np.stack([np.linalg.lstsq(f.A, f.b, rcond=None)[0] for f in locals_])


def gen_nonconvex_toy(N: int, n: int, seed: int, a: float = 1.0, beta: float = 0.5,
                      omega: float = 2.0) -> list[SinusoidalLocal]:
    """Quadratic bowls with bounded sinusoidal ripples; the sum stays coercive.

    Each ``f_i`` has curvature in ``[a - beta*omega^2, a + beta*omega^2]``, so
    with the defaults every local objective is nonconvex.
    """
    rng = make_rng(seed, STREAM_DATA)
    return [SinusoidalLocal(a, 2.0 * rng.standard_normal(n), beta, omega, rng.uniform(0, 2 * np.pi, n))
            for _ in range(N)]


def gen_general_instance(p: int, kappa: float, seed: int, g: Regularizer | None = None,
                         a_spread: tuple[float, float] = (1.0, 2.0)) -> GeneralProblem:
    """Random strongly convex quadratic with square ``A``, ``B = -I`` and condition ``kappa``.

    The singular values of ``A`` are evenly spaced in ``a_spread`` and the
    Hessian spectrum is log-spaced so that ``L s_max(A)^2 / (m s_min(A)^2)``
    equals ``kappa``.
    """
    lo, hi = a_spread
    kappa_f = kappa * (lo / hi) ** 2
    if kappa_f < 1:
        raise ValueError(f"kappa must be at least {(hi / lo) ** 2} for this singular-value spread")
    rng = make_rng(seed, STREAM_DATA)
    Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    H = Q @ np.diag(np.geomspace(1.0, kappa_f, p)) @ Q.T
    f = Quadratic(H, rng.standard_normal(p))
    U, _ = np.linalg.qr(rng.standard_normal((p, p)))
    V, _ = np.linalg.qr(rng.standard_normal((p, p)))
    A = U @ np.diag(np.linspace(lo, hi, p)) @ V
    return GeneralProblem(f, g or Regularizer.zero(), A, -np.eye(p), rng.standard_normal(p))
