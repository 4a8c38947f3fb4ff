"""Closed-form asymptotic variance for the linear diffusion

    dX = −(I + αJ)X dt + √2 dW,    π = 𝒩(0, I),

and centered quadratic observables f(x) = x·Mx + l·x − Tr M.

Two conventions are exposed.  ``asymptotic_variance_quadratic`` is the
closed form

    σ²_f(α) = 2∫₀^∞ e^{−2s} Tr[e^{αJs} M e^{−αJs} M] ds + 2 l·(I + α²JᵀJ)⁻¹ l,

which gives ‖M‖²_F + 2|l|² at α = 0.  ``clt_variance_quadratic`` is the
variance of the simulated process, whose quadratic part is twice the
closed-form one.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import scipy.integrate
import scipy.linalg

from .constants import (
    INTEGRAL_TRUNCATION_TOL,
    LIMIT_CHECK_ALPHAS,
    LIMIT_CHECK_RTOL,
    LYAPUNOV_MAX_DIM,
    LYAPUNOV_RESIDUAL_TOL,
    NULLSPACE_RTOL,
    SYMMETRY_TOL,
)
from .errors import DomainError, SolverError
from .perturbations import AntisymmetricMatrix

logger = logging.getLogger(__name__)


def _matrix(J) -> np.ndarray:
    if isinstance(J, AntisymmetricMatrix):
        return J.entries
    return np.atleast_2d(np.asarray(J, dtype=np.float64))


def _check_symmetric(M: np.ndarray, name: str = "M") -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError(f"{name} must be square, got shape {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M), initial=0.0)))
    if np.max(np.abs(M - M.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise DomainError(f"{name} must be symmetric")
    return M


def _inputs(M, l, J) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    M = _check_symmetric(M)
    d = M.shape[0]
    l = np.zeros(d) if l is None else np.asarray(l, dtype=np.float64).reshape(-1)
    J = _matrix(J)
    if l.shape != (d,) or J.shape != (d, d):
        raise DomainError(
            f"inconsistent dimensions: M {M.shape}, l {l.shape}, J {J.shape}"
        )
    return M, l, J


@dataclass(frozen=True)
class QuadraticObservable:
    """f(x) = x·Mx + l·x + k."""

    M: np.ndarray
    l: np.ndarray
    k: float = 0.0

    def __post_init__(self) -> None:
        M = _check_symmetric(self.M)
        l = np.asarray(self.l, dtype=np.float64).reshape(-1)
        if l.shape != (M.shape[0],):
            raise DomainError(f"l must have length {M.shape[0]}, got {l.shape}")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "l", l)

    @property
    def dim(self) -> int:
        return self.M.shape[0]

    def centered(self) -> QuadraticObservable:
        """Same observable with k = −Tr M, so that π(f) = 0 under 𝒩(0, I)."""
        return QuadraticObservable(self.M, self.l, -float(np.trace(self.M)))


@dataclass(frozen=True)
class PoissonSolution:
    """Mean-zero Poisson solution φ(x) = x·Cx + D·x + constant."""

    C: np.ndarray
    D: np.ndarray
    constant: float

    def residuals(self, M, l, J, alpha: float) -> dict[str, float]:
        """Defects of the three coefficient equations of −ℒφ = f − π(f)."""
        M, l, J = _inputs(M, l, J)
        A = np.eye(M.shape[0]) - alpha * J
        AC = A @ (self.C + self.C.T)
        return {
            "quadratic": float(np.linalg.norm(0.5 * (AC + AC.T) - M)),
            "linear": float(np.linalg.norm(A @ self.D - l)),
            "constant": abs(float(np.trace(self.C)) - 0.5 * float(np.trace(M))),
        }


@dataclass(frozen=True)
class VarianceCurve:
    alphas: np.ndarray
    sigma2: np.ndarray
    limit_inf: float
    lower_bound: float

    def is_monotone(self, rtol: float = 1e-10) -> bool:
        """σ² non-increasing in |α| along the grid."""
        order = np.argsort(np.abs(self.alphas), kind="stable")
        values = self.sigma2[order]
        slack = rtol * max(1.0, float(np.max(np.abs(values), initial=0.0)))
        return bool(np.all(np.diff(values) <= slack))


def solve_lyapunov(A, M) -> np.ndarray:
    """Solve AP + PAᵀ = M for A with spectrum in the open right half-plane.

    Uses the Kronecker-vectorized d²×d² system up to d = 32 and the
    Bartels–Stewart solver beyond.  The relative residual
    ‖AP + PAᵀ − M‖ / (2‖A‖‖P‖ + ‖M‖) must be below 1e−10.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    M = _check_symmetric(M)
    d = A.shape[0]
    if A.shape != (d, d) or M.shape != (d, d):
        raise DomainError(f"shape mismatch: A {A.shape}, M {M.shape}")
    min_real = float(np.min(np.linalg.eigvals(A).real))
    if not min_real > 0:
        raise SolverError(
            f"A must have spectrum in the right half-plane (min Re λ = {min_real:.3e})"
        )
    if d <= LYAPUNOV_MAX_DIM:
        eye = np.eye(d)
        kron_sum = np.kron(A, eye) + np.kron(eye, A)
        P = np.linalg.solve(kron_sum, M.reshape(-1)).reshape(d, d)
    else:
        P = scipy.linalg.solve_continuous_lyapunov(A, M)
    P = 0.5 * (P + P.T)
    residual = np.linalg.norm(A @ P + P @ A.T - M)
    scale = 2.0 * np.linalg.norm(A) * np.linalg.norm(P) + np.linalg.norm(M)
    if scale > 0 and residual / scale > LYAPUNOV_RESIDUAL_TOL:
        raise SolverError(
            f"Lyapunov residual {residual / scale:.3e} above tolerance",
            achieved=residual / scale,
        )
    return P


def poisson_solution(M, l, J, alpha: float) -> PoissonSolution:
    """Coefficients of the Poisson solution for the centered quadratic f.

    With A = I − αJ: C solves AC + CAᵀ = M, D = A⁻¹l, constant = −Tr C.
    """
    M, l, J = _inputs(M, l, J)
    A = np.eye(M.shape[0]) - alpha * J
    C = solve_lyapunov(A, M)
    D = np.linalg.solve(A, l)
    return PoissonSolution(C=C, D=D, constant=-float(np.trace(C)))


def _variance_parts(M, l, J, alpha: float) -> tuple[float, float]:
    """(quadratic, linear) parts of the closed-form σ²_f(α)."""
    sol = poisson_solution(M, l, J, alpha)
    M, l, _ = _inputs(M, l, J)
    quadratic = 2.0 * float(np.trace(sol.C @ M.T))
    linear = 2.0 * float(sol.D @ l)
    return quadratic, linear


def asymptotic_variance_quadratic(M, l, J, alpha: float) -> float:
    """Closed-form σ²_f(α) via the Lyapunov/Poisson route."""
    quadratic, linear = _variance_parts(M, l, J, alpha)
    return quadratic + linear


def clt_variance_quadratic(M, l, J, alpha: float) -> float:
    """Asymptotic variance of time averages of the simulated linear diffusion."""
    quadratic, linear = _variance_parts(M, l, J, alpha)
    return 2.0 * quadratic + linear


def asymptotic_variance_integral(M, l, J, alpha: float) -> float:
    """Closed-form σ²_f(α) by adaptive quadrature of the trace integral.

    The integral is truncated at s* with e^{−2s*}‖M‖²_F ≤ 1e−14; the linear
    part uses (I + α²JᵀJ)⁻¹ directly.
    """
    M, l, J = _inputs(M, l, J)
    norm_m2 = float(np.sum(M * M))
    quadratic = 0.0
    if norm_m2 > 0:
        s_star = max(1.0, 0.5 * math.log(norm_m2 / INTEGRAL_TRUNCATION_TOL))

        def integrand(s: float) -> float:
            rot = scipy.linalg.expm(alpha * s * J)
            return math.exp(-2.0 * s) * float(np.trace(rot @ M @ rot.T @ M.T))

        quadratic, _ = scipy.integrate.quad(
            integrand, 0.0, s_star, epsabs=1e-13, epsrel=1e-12, limit=500
        )
        quadratic *= 2.0
    gram = np.eye(M.shape[0]) + alpha**2 * (J.T @ J)
    linear = 2.0 * float(l @ np.linalg.solve(gram, l))
    return quadratic + linear


def nullspace_basis(J) -> np.ndarray:
    """Orthonormal basis (columns) of null(J); singular values below
    1e−10·σ_max count as zero."""
    J = _matrix(J)
    _, s, vt = np.linalg.svd(J)
    s_max = float(s[0]) if s.size else 0.0
    if s_max == 0.0:
        return np.eye(J.shape[0])
    rank = int(np.sum(s > NULLSPACE_RTOL * s_max))
    return vt[rank:].T


def variance_lower_bound(M, l, J) -> float:
    """λ↓(M)·λ↑(M) + 2‖l_𝒩‖², a floor for σ²_f at every α."""
    M, l, J = _inputs(M, l, J)
    lam = np.linalg.eigvalsh(M)
    basis = nullspace_basis(J)
    l_null = basis.T @ l
    return float(lam @ lam[::-1]) + 2.0 * float(l_null @ l_null)


def variance_limit(M, l, J) -> float:
    """lim_{α→∞} σ²_f(α), evaluated at α = 1e8 and checked against α = 1e6.

    The linear part is also compared with the exact limit 2‖l_𝒩‖².
    """
    M, l, J = _inputs(M, l, J)
    low, high = LIMIT_CHECK_ALPHAS
    q_low, lin_low = _variance_parts(M, l, J, low)
    q_high, lin_high = _variance_parts(M, l, J, high)
    scale = max(abs(q_high + lin_high), float(np.sum(M * M)) + 2.0 * float(l @ l), 1e-300)
    drift = abs((q_high + lin_high) - (q_low + lin_low)) / scale
    if drift > LIMIT_CHECK_RTOL:
        raise SolverError(
            f"large-alpha evaluations disagree (relative difference {drift:.3e})",
            achieved=drift,
        )
    basis = nullspace_basis(J)
    l_null = basis.T @ l
    exact_linear = 2.0 * float(l_null @ l_null)
    if abs(lin_high - exact_linear) > LIMIT_CHECK_RTOL * scale:
        raise SolverError(
            f"linear limit {lin_high:.6g} disagrees with nullspace projection "
            f"{exact_linear:.6g}",
            achieved=abs(lin_high - exact_linear),
        )
    if drift > 0.1 * LIMIT_CHECK_RTOL:
        logger.warning("Large-alpha evaluations close to tolerance: %.3e", drift)
    return q_high + lin_high


def variance_curve(M, l, J, alphas: Sequence[float]) -> VarianceCurve:
    alphas = np.asarray(alphas, dtype=np.float64)
    sigma2 = np.array([asymptotic_variance_quadratic(M, l, J, a) for a in alphas])
    return VarianceCurve(
        alphas=alphas,
        sigma2=sigma2,
        limit_inf=variance_limit(M, l, J),
        lower_bound=variance_lower_bound(M, l, J),
    )


def quasi_optimal_trace_closed_form(M, alpha: float) -> float:
    """Closed-form σ²_f(α) for l = 0 and the eigenvector-pairing J of M.

    Pairs (λ_i, λ_j) contribute ½(λ_i − λ_j)²/(1 + α²) + ½(λ_i + λ_j)².
    """
    M = _check_symmetric(M)
    lam = np.linalg.eigvalsh(M)
    d = lam.size
    if d % 2:
        raise DomainError(f"dimension must be even, got {d}")
    lo, hi = lam[: d // 2], lam[::-1][: d // 2]
    return float(
        0.5 * np.sum((lo - hi) ** 2) / (1.0 + alpha**2) + 0.5 * np.sum((lo + hi) ** 2)
    )


def polar_example_variance(alpha: float) -> float:
    """σ²_f(α) = 4(1 + 1/(1 + α²)) for f = 2x₁² under the rotated 2D OU process."""
    return 4.0 * (1.0 + 1.0 / (1.0 + alpha * alpha))
