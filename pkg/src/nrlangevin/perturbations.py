"""Divergence-free perturbations γ and the combined drift b = −β∇V + αγ.

For the constant-matrix kind the drift is b(x) = −(βI + αJ)∇V(x), i.e.
γ(x) = −J∇V(x).  At β = 1 this is γ = J∇log π.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .constants import (
    ANTISYMMETRY_TOL,
    DENSITY_FLOOR,
    DIVERGENCE_STEP,
    DIVERGENCE_TOL,
    ORTHOGONALITY_TOL,
    SYMMETRY_TOL,
)
from .errors import DomainError
from .targets import Target
from .utils import matvec

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AntisymmetricMatrix:
    """A d×d matrix J with Jᵀ = −J, checked at construction."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.entries, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DomainError(f"J must be square, got shape {m.shape}")
        sym = np.abs(m + m.T)
        tol = ANTISYMMETRY_TOL * max(1.0, float(np.max(np.abs(m), initial=0.0)))
        if sym.size and sym.max() > tol:
            i, j = np.unravel_index(int(np.argmax(sym)), sym.shape)
            raise DomainError(
                f"matrix is not antisymmetric: J[{i},{j}] + J[{j},{i}] = "
                f"{m[i, j] + m[j, i]:.3e}"
            )
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.entries, "fro"))

    def __array__(self, dtype=None, copy=None):
        return np.array(self.entries, dtype=dtype)


def antisymmetric(matrix) -> AntisymmetricMatrix:
    return AntisymmetricMatrix(np.asarray(matrix, dtype=np.float64))


def rotation_2d() -> AntisymmetricMatrix:
    """J = [[0, 1], [−1, 0]]."""
    return antisymmetric([[0.0, 1.0], [-1.0, 0.0]])


def j_linear_3d() -> AntisymmetricMatrix:
    """Unit Frobenius-norm J on ℝ³ whose nullspace is span{(1, −1, 1)}."""
    base = np.array([[0.0, 1.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, -1.0, 0.0]])
    return antisymmetric(base / math.sqrt(6.0))


def optimal_linear(l, omega) -> AntisymmetricMatrix:
    """J = (l̃⊗ω − ω⊗l̃)/√2, optimal for the linear observable f(x) = l·x.

    Args:
        l: Nonzero observable direction.
        omega: Unit vector orthogonal to ``l``.
    """
    l = np.asarray(l, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    norm_l = float(np.linalg.norm(l))
    if norm_l == 0.0:
        raise DomainError("l must be nonzero")
    if omega.shape != l.shape:
        raise DomainError("l and omega must have the same length")
    if abs(float(np.linalg.norm(omega)) - 1.0) > ORTHOGONALITY_TOL:
        raise DomainError("omega must be a unit vector")
    l_hat = l / norm_l
    if abs(float(l_hat @ omega)) > ORTHOGONALITY_TOL:
        raise DomainError(
            f"omega is not orthogonal to l (l̃·ω = {float(l_hat @ omega):.3e})"
        )
    return antisymmetric(
        (np.outer(l_hat, omega) - np.outer(omega, l_hat)) / math.sqrt(2.0)
    )


def quasi_optimal_quadratic(M) -> AntisymmetricMatrix:
    """Pair the eigenvectors of M smallest-with-largest and rotate each pair.

    With eigenvalues λ₁ ≤ … ≤ λ_d and eigenvectors e_k, pairs are
    (k, d − k + 1) and J = Σ_k e_{i_k}⊗e_{j_k} − e_{j_k}⊗e_{i_k}.  Ties keep
    the order returned by the symmetric eigensolver.
    """
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    d = M.shape[0]
    if M.shape != (d, d):
        raise DomainError(f"M must be square, got shape {M.shape}")
    if d % 2:
        raise DomainError(f"dimension must be even for eigenvector pairing, got {d}")
    if np.max(np.abs(M - M.T)) > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(M)))):
        raise DomainError("M must be symmetric")
    _, vecs = np.linalg.eigh(M)
    J = np.zeros((d, d))
    for k in range(d // 2):
        e_i, e_j = vecs[:, k], vecs[:, d - 1 - k]
        J += np.outer(e_i, e_j) - np.outer(e_j, e_i)
    return antisymmetric(J)


def block_circulant_J1(n_particles: int) -> AntisymmetricMatrix:
    """2N×2N block circulant: I₂ on the block superdiagonal, −I₂ below, wrapped."""
    if n_particles < 3:
        raise DomainError(f"n_particles must be >= 3, got {n_particles}")
    n = n_particles
    J = np.zeros((2 * n, 2 * n))
    eye = np.eye(2)
    for i in range(n):
        up = (i + 1) % n
        down = (i - 1) % n
        J[2 * i : 2 * i + 2, 2 * up : 2 * up + 2] = eye
        J[2 * i : 2 * i + 2, 2 * down : 2 * down + 2] = -eye
    return antisymmetric(J)


def dimer_rotation_J2(n_particles: int) -> AntisymmetricMatrix:
    """Rotation acting only on the two dimer particles' coordinates."""
    if n_particles < 2:
        raise DomainError(f"n_particles must be >= 2, got {n_particles}")
    J = np.zeros((2 * n_particles, 2 * n_particles))
    J[0:4, 0:4] = [
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0, 0.0],
        [0.0, -1.0, 0.0, 0.0],
    ]
    return antisymmetric(J)


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


class PerturbationKind(str, Enum):
    LINEAR_J = "linear_J"
    PSI_TRUNCATED = "psi_truncated"
    MATRIX_FIELD = "matrix_field"
    VECTOR_FIELD = "vector_field"
    NONE = "none"


ScalarMap = Callable[[np.ndarray], np.ndarray]
MatrixField = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class Perturbation:
    """A flow γ with strength α; evaluate with ``gamma``.

    ``VECTOR_FIELD`` wraps an arbitrary γ for diagnostics and is not
    guaranteed to preserve π.
    """

    kind: PerturbationKind
    alpha: float = 0.0
    J: AntisymmetricMatrix | None = None
    psi: ScalarMap | None = None
    j_field: MatrixField | None = None
    div_j: Callable[[np.ndarray], np.ndarray] | None = None
    field: Callable[[np.ndarray], np.ndarray] | None = None

    def with_alpha(self, alpha: float) -> Perturbation:
        return replace(self, alpha=float(alpha))

    @property
    def is_trivial(self) -> bool:
        return self.kind is PerturbationKind.NONE or self.alpha == 0.0

    def gamma(
        self,
        x: np.ndarray,
        grad: np.ndarray,
        potential: np.ndarray | None = None,
        beta: float = 1.0,
    ) -> np.ndarray:
        """γ(x) from precomputed ∇V(x) (and V(x) for the ψ-truncated kind)."""
        kind = self.kind
        if kind is PerturbationKind.LINEAR_J:
            return -matvec(self.J.entries, grad)
        if kind is PerturbationKind.PSI_TRUNCATED:
            if potential is None:
                raise DomainError("psi-truncated flow needs V(x)")
            return matvec(self.J.entries, grad) * np.asarray(self.psi(potential))[..., None]
        if kind is PerturbationKind.MATRIX_FIELD:
            jx = np.asarray(self.j_field(x), dtype=np.float64)
            out = -beta * jx[..., :, 0] * grad[..., 0, None]
            for k in range(1, grad.shape[-1]):
                out = out - beta * jx[..., :, k] * grad[..., k, None]
            return out + np.asarray(self.div_j(x), dtype=np.float64)
        if kind is PerturbationKind.VECTOR_FIELD:
            return np.asarray(self.field(x), dtype=np.float64)
        return np.zeros_like(grad)

    def gamma_at(self, target: Target, x: np.ndarray) -> np.ndarray:
        """γ(x) evaluating the target's potential and gradient as needed."""
        x = target.domain.wrap(x)
        potential = (
            target.potential(x) if self.kind is PerturbationKind.PSI_TRUNCATED else None
        )
        return self.gamma(x, target.gradient(x), potential, target.beta)


def no_perturbation() -> Perturbation:
    return Perturbation(PerturbationKind.NONE)


def linear_flow(J: AntisymmetricMatrix, alpha: float = 0.0) -> Perturbation:
    """γ(x) = −J∇V(x), giving b(x) = −(βI + αJ)∇V(x)."""
    return Perturbation(PerturbationKind.LINEAR_J, alpha=float(alpha), J=J)


def psi_truncated_flow(
    J: AntisymmetricMatrix, psi: ScalarMap, target: Target, alpha: float = 0.0
) -> Perturbation:
    """γ(x) = J∇V(x)·ψ(V(x)); bounded when ψ(V)|∇V| ≤ 1.

    Boundedness is the caller's modelling choice; ``check_divergence_free``
    is the guard for π-invariance.
    """
    if J.dim != target.dim:
        raise DomainError(f"J has dimension {J.dim}, target has {target.dim}")
    return Perturbation(PerturbationKind.PSI_TRUNCATED, alpha=float(alpha), J=J, psi=psi)


def matrix_field_flow(
    j_field: MatrixField,
    div_j: Callable[[np.ndarray], np.ndarray],
    target: Target,
    alpha: float = 0.0,
    sample_points: np.ndarray | None = None,
) -> Perturbation:
    """γ(x) = −βJ(x)∇V(x) + ∇·J(x) with (∇·J)_i = Σ_j ∂_j J_ij.

    J(x) is checked for antisymmetry at ``sample_points`` (64 standard
    normal points by default).
    """
    if sample_points is None:
        sample_points = np.random.default_rng(0).standard_normal((64, target.dim))
    sample_points = target.domain.wrap(np.atleast_2d(sample_points))
    jx = np.asarray(j_field(sample_points), dtype=np.float64)
    if jx.shape != sample_points.shape + (target.dim,):
        raise DomainError(
            f"J field must return shape (..., {target.dim}, {target.dim}), got {jx.shape}"
        )
    defect = np.abs(jx + np.swapaxes(jx, -1, -2)).max(axis=(-1, -2))
    scale = np.maximum(1.0, np.abs(jx).max(axis=(-1, -2)))
    worst = int(np.argmax(defect / scale))
    if defect[worst] > ANTISYMMETRY_TOL * scale[worst]:
        raise DomainError(
            f"J(x) is not antisymmetric at sample point {sample_points[worst].tolist()}"
            f" (defect {defect[worst]:.3e})"
        )
    return Perturbation(
        PerturbationKind.MATRIX_FIELD, alpha=float(alpha), j_field=j_field, div_j=div_j
    )


def vector_field_flow(field: Callable[[np.ndarray], np.ndarray], alpha: float = 0.0) -> Perturbation:
    """Arbitrary γ for diagnostics; not assumed to preserve π."""
    return Perturbation(PerturbationKind.VECTOR_FIELD, alpha=float(alpha), field=field)


# ---------------------------------------------------------------------------
# Drift
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Drift:
    """b(x) = −β∇V(x) + αγ(x)."""

    target: Target
    perturbation: Perturbation

    def __post_init__(self) -> None:
        J = self.perturbation.J
        if J is not None and J.dim != self.target.dim:
            raise DomainError(f"J has dimension {J.dim}, target has {self.target.dim}")

    def evaluate(
        self,
        x: np.ndarray,
        grad: np.ndarray,
        potential: np.ndarray | None = None,
        include_perturbation: bool = True,
    ) -> np.ndarray:
        """Drift from precomputed ∇V; set ``include_perturbation=False`` for −β∇V."""
        beta = self.target.beta
        b = -beta * grad
        p = self.perturbation
        if include_perturbation and not p.is_trivial:
            b = b + p.alpha * p.gamma(x, grad, potential, beta)
        return b


def drift_eval(drift: Drift, x: np.ndarray) -> np.ndarray:
    """b(x) evaluated from scratch at ``x``."""
    target = drift.target
    x = target.domain.wrap(x)
    potential = (
        target.potential(x)
        if drift.perturbation.kind is PerturbationKind.PSI_TRUNCATED
        else None
    )
    return drift.evaluate(x, target.gradient(x), potential)


# ---------------------------------------------------------------------------
# Divergence check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DivergenceReport:
    """Worst |∇·(γπ̃)|/π̃ over the sampled points.

    ``passed`` compares each residual with ``tol`` times the larger of 1
    and Σ_i |∂_i(γ_i π̃)|/π̃ at the same point.
    """

    passed: bool
    max_residual: float
    worst_point: np.ndarray
    tol: float
    flux_scale: float = 0.0


def _flux_derivative(
    perturbation: Perturbation,
    target: Target,
    points: np.ndarray,
    v0: np.ndarray,
    axis: int,
    step: float,
) -> np.ndarray:
    """∂_axis(γ_axis π̃)/π̃ by the five-point stencil."""
    beta = target.beta
    total = np.zeros(points.shape[0])
    for k, weight in ((2, -1.0), (1, 8.0), (-1, -8.0), (-2, 1.0)):
        shifted = points.copy()
        shifted[:, axis] += k * step
        ratio = np.exp(-beta * (target.potential(shifted) - v0))
        total += weight * perturbation.gamma_at(target, shifted)[:, axis] * ratio
    return total / (12.0 * step)


def check_divergence_free(
    perturbation: Perturbation,
    target: Target,
    points: np.ndarray,
    step: float = DIVERGENCE_STEP,
    tol: float = DIVERGENCE_TOL,
) -> DivergenceReport:
    """Fourth-order finite-difference check of ∇·(γπ̃) = 0 for π̃ = exp(−βV).

    The neighbour densities enter as ratios π̃(x + k·h·e_i)/π̃(x), so the
    residual is |∇·(γπ̃)(x)| / π̃(x) without ever forming π̃ in the tails.
    """
    if not step > 0:
        raise DomainError("finite-difference step must be > 0")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    beta = target.beta
    v0 = target.potential(points)
    residual = np.zeros(points.shape[0])
    scale = np.zeros(points.shape[0])
    for i in range(target.dim):
        term = _flux_derivative(perturbation, target, points, v0, i, step)
        residual += term
        scale += np.abs(term)
    residual = np.abs(residual)
    # Below the density floor the normalized residual is taken as zero
    live = -beta * v0 > math.log(DENSITY_FLOOR)
    residual = np.where(live, residual, 0.0)
    excess = residual / (tol * np.maximum(1.0, scale))
    worst = int(np.argmax(excess))
    report = DivergenceReport(
        passed=bool(excess[worst] <= 1.0),
        max_residual=float(residual.max()),
        worst_point=points[worst].copy(),
        tol=tol,
        flux_scale=float(scale[worst]),
    )
    logger.debug(
        "Divergence check %s on %s: max residual %.3e (flux scale %.3e at worst point)",
        perturbation.kind.value,
        target.name,
        report.max_residual,
        report.flux_scale,
    )
    return report


def build_perturbation(
    name: str,
    params: dict | None = None,
    *,
    target: Target,
    alpha: float = 0.0,
) -> Perturbation:
    """Construct a named constant-matrix perturbation for ``target``."""
    params = dict(params or {})
    if name == "none":
        return no_perturbation()
    n_particles = target.params.get("n_particles")
    builders: dict[str, Callable[[], AntisymmetricMatrix]] = {
        "rotation2d": rotation_2d,
        "j_linear_3d": j_linear_3d,
        "optimal_linear": lambda: optimal_linear(params["l"], params["omega"]),
        "quasi_opt_quadratic": lambda: quasi_optimal_quadratic(params["M"]),
        "dimer_j1": lambda: block_circulant_J1(int(params.get("n_particles", n_particles))),
        "dimer_j2": lambda: dimer_rotation_J2(int(params.get("n_particles", n_particles))),
        "matrix": lambda: antisymmetric(params["J"]),
    }
    try:
        builder = builders[name]
    except KeyError:
        raise DomainError(
            f"unknown perturbation {name!r}; choose from {sorted([*builders, 'none'])}"
        ) from None
    try:
        J = builder()
    except (KeyError, TypeError) as exc:
        raise DomainError(f"bad parameters for perturbation {name!r}: {exc}") from exc
    if J.dim != target.dim:
        raise DomainError(
            f"perturbation {name!r} has dimension {J.dim}, target has {target.dim}"
        )
    return linear_flow(J, alpha)
