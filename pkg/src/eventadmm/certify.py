"""Rate certificates for the event-based general-form algorithm.

The iterates ``xi_k = (s_k, u_k)`` obey a linear recursion driven by the
nonlinearity ``v_k = (grad f_hat(r_{k+1}), gamma_{k+1})`` and the estimation
error ``e_k``:

    xi_{k+1} = A_hat xi_k + B_hat v_k + E_hat e_k .

All matrices are scalar blocks acting through a Kronecker product with the
identity, so every certificate computation happens on 2x2, 4x4 and 7x7
matrices. A quadratic Lyapunov function ``V = (xi - xi*)' P (xi - xi*)`` that
satisfies the 4x4 matrix inequality built here decays like ``tau^2`` per
step up to a floor proportional to the squared error bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ALPHA_MIN = 0.675


#%% linear system and sector matrices

@dataclass(frozen=True)
class LtiSystem:
    """State-space blocks for over-relaxation ``alpha``.

    Outputs are ``y = (r_{k+1} - c, s_{k+1})``, ``w1 = (r_{k+1} - c, grad f_hat)``
    and ``w2 = (s_{k+1}, gamma)``.
    """

    alpha: float
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    Ey: np.ndarray
    C1: np.ndarray
    D1: np.ndarray
    E1: np.ndarray
    C2: np.ndarray
    D2: np.ndarray
    E2: np.ndarray

    @classmethod
    def from_alpha(cls, alpha: float) -> "LtiSystem":
        a = float(alpha)
        zero7 = np.zeros(7)
        E = np.array([[-a, 0, 0, a, 0, a, -1],
                      [-a, a, 1, 0, a - 1, 0, -1]], dtype=float)
        Ey = np.array([[0, 0, 0, -1, 0, -1, 0],
                       [-a, 0, 0, a, 0, a, -1]], dtype=float)
        return cls(
            alpha=a,
            A=np.array([[1, a - 1], [0, 0]], dtype=float),
            B=np.array([[a, -1], [0, -1]], dtype=float),
            C=np.array([[-1, -1], [1, a - 1]], dtype=float),
            D=np.array([[-1, 0], [a, -1]], dtype=float),
            E=E,
            Ey=Ey,
            C1=np.array([[-1, -1], [0, 0]], dtype=float),
            D1=np.array([[-1, 0], [1, 0]], dtype=float),
            E1=np.vstack([Ey[0], zero7]),
            C2=np.array([[1, a - 1], [0, 0]], dtype=float),
            D2=np.array([[a, -1], [0, 1]], dtype=float),
            E2=np.vstack([Ey[1], zero7]),
        )


@dataclass(frozen=True)
class SectorMatrices:
    """Quadratic constraints satisfied by ``(r - c, grad f_hat)`` and ``(s, gamma)``.

    ``M1`` encodes strong convexity and smoothness of the scaled objective
    when the step size is ``rho = kappa**eps * sqrt(m_hat L_hat)``-consistent;
    ``M2`` encodes monotonicity of the subdifferential.
    """

    kappa: float
    eps: float
    M1: np.ndarray
    M2: np.ndarray

    @classmethod
    def build(cls, kappa: float, eps: float) -> "SectorMatrices":
        rho0 = kappa**eps
        off = (kappa**-0.5 + kappa**0.5) / rho0
        M1 = np.array([[-2.0 / rho0**2, off], [off, -2.0]])
        M2 = np.array([[0.0, 1.0], [1.0, 0.0]])
        return cls(kappa, eps, M1, M2)


#%% certificate

@dataclass
class Certificate:
    """Closed-form Lyapunov certificate for condition number ``kappa``.

    ``gamma3`` and ``gamma4`` only enter the disturbance matrix ``Q``; the
    matrix inequality itself depends on ``Lam1`` and ``Lam2``.
    """

    kappa: float
    eps: float
    alpha: float
    P: np.ndarray
    tau: float
    Lam1: float
    Lam2: float
    gamma1: float
    gamma2: float
    gamma3: float
    gamma4: float
    lti: LtiSystem = field(repr=False)
    sector: SectorMatrices = field(repr=False)

    @property
    def lam1(self) -> float:
        return self.Lam1 / (1 + self.gamma3)

    @property
    def lam2(self) -> float:
        return self.Lam2 / (1 + self.gamma4)

    @property
    def kappa_P(self) -> float:
        """Condition number of P in closed form."""
        k, a = self.kappa, self.alpha
        root = math.sqrt(4 * k * (a - 1) ** 2 + 1)
        return (2 * math.sqrt(k) - 1 + root) / (2 * math.sqrt(k) - 1 - root)

    @property
    def sigma_min_P(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[0])

    @property
    def sigma_max_P(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[-1])

    def with_gammas(self, gamma3: float, gamma4: float) -> "Certificate":
        return Certificate(self.kappa, self.eps, self.alpha, self.P, self.tau, self.Lam1, self.Lam2,
                           self.gamma1, self.gamma2, gamma3, gamma4, self.lti, self.sector)

    def with_tau(self, tau: float) -> "Certificate":
        return Certificate(self.kappa, self.eps, self.alpha, self.P, tau, self.Lam1, self.Lam2,
                           self.gamma1, self.gamma2, self.gamma3, self.gamma4, self.lti, self.sector)


def alpha_range(kappa: float) -> tuple[float, float]:
    """Relaxation parameters covered by the closed-form certificate."""
    return ALPHA_MIN, 1.0 + math.sqrt(1.0 - 1.0 / math.sqrt(kappa))


def build_certificate(kappa: float, eps: float = 0.0, alpha: float = 1.0,
                      gamma3: float = 1.0, gamma4: float = 1.0, check_range: bool = True) -> Certificate:
    """Fill every certificate parameter from its closed form.

    Raises ``ValueError`` for ``kappa <= 1``, ``eps < 0`` or (with
    ``check_range``) ``alpha`` outside :func:`alpha_range`.
    """
    if not kappa > 1:
        raise ValueError("kappa must exceed 1")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    lo, hi = alpha_range(kappa)
    if check_range and not lo < alpha < hi:
        raise ValueError(f"alpha={alpha} outside ({lo:.3f}, {hi:.3f})")
    if not (gamma3 > 0 and gamma4 > 0):
        raise ValueError("gamma3 and gamma4 must be positive")
    a = float(alpha)
    P = np.array([[1.0, a - 1.0], [a - 1.0, 1.0 - 1.0 / math.sqrt(kappa)]])
    return Certificate(
        kappa=float(kappa), eps=float(eps), alpha=a, P=P,
        tau=1.0 - a / (4.0 * kappa ** (eps + 0.5)),
        Lam1=a * kappa ** (eps - 0.5), Lam2=a,
        gamma1=a / kappa ** (eps + 1.5), gamma2=1.0 / kappa,
        gamma3=float(gamma3), gamma4=float(gamma4),
        lti=LtiSystem.from_alpha(a), sector=SectorMatrices.build(kappa, eps))


def lmi_matrix(cert: Certificate, lti: LtiSystem | None = None,
               sector: SectorMatrices | None = None) -> np.ndarray:
    """The 4x4 matrix that must be negative semidefinite."""
    S = cert.lti if lti is None else lti
    M = cert.sector if sector is None else sector
    P, tau = cert.P, cert.tau
    top = np.block([[(1 + cert.gamma1) * S.A.T @ P @ S.A - tau**2 * P, S.A.T @ P @ S.B],
                    [S.B.T @ P @ S.A, (1 + cert.gamma2) * S.B.T @ P @ S.B]])
    CD = np.block([[S.C1, S.D1], [S.C2, S.D2]])
    Lam = np.zeros((4, 4))
    Lam[:2, :2] = cert.Lam1 * M.M1
    Lam[2:, 2:] = cert.Lam2 * M.M2
    out = top + CD.T @ Lam @ CD
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    max_eig: float
    rel_max_eig: float
    minors: tuple[float, ...]


def check_feasibility(cert: Certificate, tol: float = 1e-9) -> Feasibility:
    """Negative semidefiniteness test of :func:`lmi_matrix`.

    ``minors`` are the leading principal minors of the negated matrix; they
    are all positive when the inequality holds strictly.
    """
    M = lmi_matrix(cert)
    top = float(np.linalg.eigvalsh(M)[-1])
    scale = float(np.linalg.norm(M, 2))
    minors = tuple(float(np.linalg.det(-M[:j, :j])) for j in range(1, 5))
    return Feasibility(top <= tol * scale, top, top / scale, minors)


def relax_tau(cert: Certificate, tol: float = 1e-9, iters: int = 60) -> float | None:
    """Smallest contraction factor (bisection) for which the inequality holds.

    Keeps every other closed-form parameter. Returns ``None`` when even
    ``tau -> 1`` is infeasible.
    """
    lo, hi = cert.tau, 1.0 - 1e-12
    if check_feasibility(cert, tol).feasible:
        return cert.tau
    if not check_feasibility(cert.with_tau(hi), tol).feasible:
        return None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if check_feasibility(cert.with_tau(mid), tol).feasible:
            hi = mid
        else:
            lo = mid
    return hi


#%% disturbance floor

def compute_Q(cert: Certificate) -> tuple[np.ndarray, float, float]:
    """Return ``(Q, lambda_max(Q), floor coefficient)``.

    The floor for an error bound ``Delta`` is ``coefficient * Delta**2`` with
    coefficient ``lambda_max(Q) / (sigma_min(P) (1 - tau^2))``.
    """
    S, M, P = cert.lti, cert.sector, cert.P
    Q = ((1 + 1 / cert.gamma1 + 1 / cert.gamma2) * S.E.T @ P @ S.E
         + (1 + 1 / cert.gamma3 + 1 / cert.gamma4)
         * (cert.lam1 * S.E1.T @ M.M1 @ S.E1 + cert.lam2 * S.E2.T @ M.M2 @ S.E2))
    Q = 0.5 * (Q + Q.T)
    lam = float(np.linalg.eigvalsh(Q)[-1])
    coeff = lam / (cert.sigma_min_P * (1 - cert.tau**2))
    return Q, lam, coeff


def floor(cert: Certificate, delta: float) -> float:
    return compute_Q(cert)[2] * delta**2


def floor_cap(kappa: float, eps: float, alpha: float, delta: float = 1.0) -> float:
    """Closed-form upper estimate of the floor."""
    return 60.0 * kappa ** (2 + 2 * eps) * delta**2 / (alpha * (1 - abs(alpha - 1)))


GAMMA_GRID = np.logspace(-2, 2, 17)


def best_gammas(cert: Certificate, grid=GAMMA_GRID) -> Certificate:
    """Certificate with the (gamma3, gamma4) pair from ``grid`` minimizing the floor."""
    best, best_val = cert, compute_Q(cert)[2]
    for g3 in grid:
        for g4 in grid:
            cand = cert.with_gammas(float(g3), float(g4))
            val = compute_Q(cand)[2]
            if val < best_val:
                best, best_val = cand, val
    return best


def linear_rate_bound(cert: Certificate, xi0_err_sq: float, k, delta: float) -> np.ndarray:
    """``kappa_P |xi_0 - xi*|^2 tau^(2k) + floor`` evaluated at iterations ``k``."""
    k = np.asarray(k, dtype=float)
    return cert.kappa_P * xi0_err_sq * cert.tau ** (2 * k) + floor(cert, delta)


def contraction_bound(V0: float, a: float, b: float, k) -> np.ndarray:
    """If ``V_{k+1} <= (1-a) V_k + a b`` then ``V_k <= V0 (1-a)^k + b``."""
    if not 0 < a < 1 or b < 0:
        raise ValueError("need 0 < a < 1 and b >= 0")
    return V0 * (1 - a) ** np.asarray(k, dtype=float) + b


def diminishing_k0(tau: float, t: float) -> float:
    return 1.0 / ((2.0 / (1.0 + tau**2)) ** (1.0 / t) - 1.0)


def diminishing_bound(tau: float, lam_max_Q: float, q: float, t: float, P: np.ndarray,
                      xi0_err_sq: float, k) -> np.ndarray:
    """Bound on ``|xi_k - xi*|^2`` when ``|e_k|^2 <= q/(k+1)^t``.

    Returns ``(k0/(k+k0))^t c0 / sigma_min(P)`` with
    ``c0 = max(2 lambda_max(Q) q/(1-tau^2), sigma_max(P) |xi_0 - xi*|^2)``.
    """
    if not 0 < tau < 1 or not t > 0:
        raise ValueError("need 0 < tau < 1 and t > 0")
    eigs = np.linalg.eigvalsh(P)
    k0 = diminishing_k0(tau, t)
    c0 = max(2 * max(lam_max_Q, 0.0) * q / (1 - tau**2), eigs[-1] * xi0_err_sq)
    k = np.asarray(k, dtype=float)
    return (k0 / (k + k0)) ** t * c0 / eigs[0]


#%% replay along a recorded run

@dataclass(frozen=True)
class ReplayResiduals:
    state: float
    y: float
    w1: float
    w2: float

    @property
    def worst(self) -> float:
        return max(self.state, self.y, self.w1, self.w2)


def verify_state_recursion(trace, problem, alpha: float) -> ReplayResiduals:
    """Largest relative residual of the state and output equations along ``trace``.

    Each step's residual is divided by ``1 + |xi_k|``.
    """
    S = LtiSystem.from_alpha(alpha)
    c = problem.c
    worst = dict(state=0.0, y=0.0, w1=0.0, w2=0.0)
    for k in range(trace.horizon):
        xi, v, e = trace.xi[k], trace.v[k], trace.e[k]
        scale = 1.0 + np.linalg.norm(xi)
        s_next = trace.xi[k + 1][0]
        y = np.stack([trace.r[k] - c, s_next])
        w1 = np.stack([trace.r[k] - c, v[0]])
        w2 = np.stack([s_next, v[1]])
        res = {
            "state": trace.xi[k + 1] - (S.A @ xi + S.B @ v + S.E @ e),
            "y": y - (S.C @ xi + S.D @ v + S.Ey @ e),
            "w1": w1 - (S.C1 @ xi + S.D1 @ v + S.E1 @ e),
            "w2": w2 - (S.C2 @ xi + S.D2 @ v + S.E2 @ e),
        }
        for key, val in res.items():
            worst[key] = max(worst[key], float(np.linalg.norm(val)) / scale)
    return ReplayResiduals(**worst)


def lyapunov_values(trace, P: np.ndarray, xi_star: np.ndarray) -> np.ndarray:
    """``V_k = (xi_k - xi*)' (P kron I) (xi_k - xi*)`` for every recorded k."""
    d = trace.xi - xi_star[None]
    return np.einsum("kia,ij,kja->k", d, P, d)


def sector_values(trace, problem, fixed_point, cert: Certificate) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic forms of both sector constraints along ``trace`` (nonnegative when they hold)."""
    c = problem.c
    M1, M2 = cert.sector.M1, cert.sector.M2
    w1s = np.stack([fixed_point.r_star - c, fixed_point.beta_star])
    w2s = np.stack([fixed_point.s_star, fixed_point.gamma_star])
    q1 = np.empty(trace.horizon)
    q2 = np.empty(trace.horizon)
    for k in range(trace.horizon):
        d1 = np.stack([trace.r[k] - c, trace.v[k][0]]) - w1s
        d2 = np.stack([trace.xi[k + 1][0], trace.v[k][1]]) - w2s
        q1[k] = np.einsum("ia,ij,ja->", d1, M1, d1)
        q2[k] = np.einsum("ia,ij,ja->", d2, M2, d2)
    return q1, q2


def certificate_report(kappa: float, alpha: float, eps: float, delta: float = 0.0) -> dict:
    """Summary used by the command line interface."""
    cert = build_certificate(kappa, eps, alpha, check_range=False)
    feas = check_feasibility(cert)
    tuned = best_gammas(cert)
    _, lam, coeff = compute_Q(tuned)
    return {
        "kappa": kappa, "alpha": alpha, "eps": eps, "delta": delta,
        "feasible": bool(feas.feasible),
        "max_eig": feas.max_eig,
        "rel_max_eig": feas.rel_max_eig,
        "tau": cert.tau,
        "relaxed_tau": relax_tau(cert),
        "kappa_P": cert.kappa_P,
        "lambda_max_Q": lam,
        "floor": coeff * delta**2,
        "floor_coefficient": coeff,
        "floor_cap_coefficient": floor_cap(kappa, eps, alpha),
        "minors": list(feas.minors),
        "gamma3": tuned.gamma3,
        "gamma4": tuned.gamma4,
    }
