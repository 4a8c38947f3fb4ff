"""Target distributions π ∝ exp(−βV) as potentials with analytic gradients.

Every potential and gradient accepts a batch of points of shape ``(..., d)``
and returns shape ``(...)`` / ``(..., d)`` respectively.  Torus coordinates
are reduced to ``[0, L)`` before evaluation.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType

import numpy as np

from .constants import (
    COINCIDENT_DISTANCE_FLOOR,
    DIMER_DEFAULT_BARRIER,
    DIMER_DEFAULT_BOX_LENGTH,
    DIMER_DEFAULT_EPSILON,
    DIMER_DEFAULT_N_PARTICLES,
    DIMER_DEFAULT_SIGMA,
    DIMER_DEFAULT_WELL_WIDTH,
    GRADIENT_CHECK_STEP,
    PERIODIC_DEFAULT_BETA,
    WARPED_DEFAULT_B,
)
from .errors import DomainError
from .utils import rowdot

logger = logging.getLogger(__name__)

ArrayFn = Callable[[np.ndarray], np.ndarray]
BoxFn = Callable[[float], np.ndarray]


class DomainKind(str, Enum):
    EUCLIDEAN = "euclidean"
    TORUS = "torus"


@dataclass(frozen=True)
class Domain:
    """State space of a target: ℝᵈ or the periodic box [0, L)ᵈ."""

    kind: DomainKind
    dim: int
    period: float | None = None

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise DomainError(f"dim must be >= 1, got {self.dim}")
        if self.kind is DomainKind.TORUS:
            if self.period is None or not self.period > 0:
                raise DomainError("torus domain needs a period L > 0")
        elif self.period is not None:
            raise DomainError("euclidean domain takes no period")

    @property
    def is_torus(self) -> bool:
        return self.kind is DomainKind.TORUS

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Reduce coordinates to [0, L) on the torus; identity on ℝᵈ."""
        x = np.asarray(x, dtype=np.float64)
        if not self.is_torus:
            return x
        period = self.period
        wrapped = x - period * np.floor(x / period)
        # floor can leave exactly L for tiny negative inputs
        return np.where(wrapped >= period, 0.0, wrapped)

    def displacement(self, x_from: np.ndarray, x_to: np.ndarray) -> np.ndarray:
        """Displacement x_to − x_from, nearest image on the torus."""
        delta = np.asarray(x_to, dtype=np.float64) - np.asarray(x_from, dtype=np.float64)
        if self.is_torus:
            delta = delta - self.period * np.round(delta / self.period)
        return delta


@dataclass(frozen=True, eq=False)
class Target:
    """A Gibbs target π(x) ∝ exp(−βV(x)); the normalization is never needed.

    Attributes:
        name: Registry name of the target.
        domain: State space.
        beta: Inverse temperature β > 0.
        potential_fn: Batched x ↦ V(x) on wrapped coordinates.
        gradient_fn: Batched x ↦ ∇V(x) on wrapped coordinates.
        box_fn: Optional quadrature hint, n_std ↦ per-axis bounds ``(d, 2)``.
        params: Construction parameters, kept for reporting.
    """

    name: str
    domain: Domain
    beta: float
    potential_fn: ArrayFn
    gradient_fn: ArrayFn
    box_fn: BoxFn | None = None
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise DomainError(f"beta must be finite and > 0, got {self.beta}")
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    @property
    def dim(self) -> int:
        return self.domain.dim

    def potential(self, x: np.ndarray) -> np.ndarray:
        return self.potential_fn(self.domain.wrap(x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.gradient_fn(self.domain.wrap(x))

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Unnormalized log π̃(x) = −βV(x)."""
        return -self.beta * self.potential(x)


# ---------------------------------------------------------------------------
# Gaussian-type targets
# ---------------------------------------------------------------------------


def standard_gaussian(dim: int) -> Target:
    """𝒩(0, I) on ℝᵈ: V(x) = |x|²/2, β = 1."""
    if dim < 1:
        raise DomainError(f"dim must be >= 1, got {dim}")

    def potential(x: np.ndarray) -> np.ndarray:
        return 0.5 * rowdot(x, x)

    def gradient(x: np.ndarray) -> np.ndarray:
        return np.array(x, dtype=np.float64, copy=True)

    def box(n_std: float) -> np.ndarray:
        return np.tile([-n_std, n_std], (dim, 1)).astype(np.float64)

    return Target(
        name="standard_gaussian",
        domain=Domain(DomainKind.EUCLIDEAN, dim),
        beta=1.0,
        potential_fn=potential,
        gradient_fn=gradient,
        box_fn=box,
        params={"dim": dim},
    )


def warped_gaussian(b: float = WARPED_DEFAULT_B) -> Target:
    """Banana-shaped target V(x) = x₁²/100 + (x₂ + b·x₁² − 100b)², β = 1."""
    if not (math.isfinite(b) and b > 0):
        raise DomainError(f"curvature b must be > 0, got {b}")

    def potential(x: np.ndarray) -> np.ndarray:
        x1, x2 = x[..., 0], x[..., 1]
        z = x2 + b * x1 * x1 - 100.0 * b
        return x1 * x1 / 100.0 + z * z

    def gradient(x: np.ndarray) -> np.ndarray:
        x1, x2 = x[..., 0], x[..., 1]
        z = x2 + b * x1 * x1 - 100.0 * b
        g = np.empty(np.shape(x), dtype=np.float64)
        g[..., 0] = x1 / 50.0 + 4.0 * b * x1 * z
        g[..., 1] = 2.0 * z
        return g

    def box(n_std: float) -> np.ndarray:
        # x₁ ~ 𝒩(0, 50) and z = x₂ + b·x₁² − 100b ~ 𝒩(0, 1/2) independently
        x1_max = n_std * math.sqrt(50.0)
        z_max = n_std * math.sqrt(0.5)
        return np.array(
            [
                [-x1_max, x1_max],
                [100.0 * b - b * x1_max**2 - z_max, 100.0 * b + z_max],
            ]
        )

    return Target(
        name="warped_gaussian",
        domain=Domain(DomainKind.EUCLIDEAN, 2),
        beta=1.0,
        potential_fn=potential,
        gradient_fn=gradient,
        box_fn=box,
        params={"b": b},
    )


def periodic_2d(beta: float = PERIODIC_DEFAULT_BETA) -> Target:
    """V(x) = sin(2πx₁)cos(2πx₂) on the unit torus 𝕋²."""
    if not (math.isfinite(beta) and beta > 0):
        raise DomainError(f"beta must be > 0, got {beta}")
    two_pi = 2.0 * math.pi

    def potential(x: np.ndarray) -> np.ndarray:
        return np.sin(two_pi * x[..., 0]) * np.cos(two_pi * x[..., 1])

    def gradient(x: np.ndarray) -> np.ndarray:
        a, c = two_pi * x[..., 0], two_pi * x[..., 1]
        g = np.empty(np.shape(x), dtype=np.float64)
        g[..., 0] = two_pi * np.cos(a) * np.cos(c)
        g[..., 1] = -two_pi * np.sin(a) * np.sin(c)
        return g

    return Target(
        name="periodic_2d",
        domain=Domain(DomainKind.TORUS, 2, period=1.0),
        beta=beta,
        potential_fn=potential,
        gradient_fn=gradient,
        params={"beta": beta},
    )


# ---------------------------------------------------------------------------
# Dimer in a WCA solvent
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DimerParams:
    """Parameters of the dimer-in-solvent model on a periodic 2D box.

    Attributes:
        n_particles: Total particle count N (particles 0 and 1 form the dimer).
        box_length: Side length L of the periodic box.
        epsilon: WCA energy scale ε.
        sigma: WCA length scale σ.
        h: Double-well barrier height.
        w: Double-well half-width (must be positive).
        beta: Inverse temperature.
        distance_floor: Pair distances below this raise ``DomainError``.
    """

    n_particles: int = DIMER_DEFAULT_N_PARTICLES
    box_length: float = DIMER_DEFAULT_BOX_LENGTH
    epsilon: float = DIMER_DEFAULT_EPSILON
    sigma: float = DIMER_DEFAULT_SIGMA
    h: float = DIMER_DEFAULT_BARRIER
    w: float = DIMER_DEFAULT_WELL_WIDTH
    beta: float = 1.0
    distance_floor: float = COINCIDENT_DISTANCE_FLOOR

    def __post_init__(self) -> None:
        if self.n_particles < 3:
            raise DomainError(f"n_particles must be >= 3, got {self.n_particles}")
        for name in ("box_length", "epsilon", "sigma", "h", "w", "beta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be finite and > 0, got {value}")
        if not self.r0 < self.box_length / 2:
            raise DomainError(
                f"cutoff r0={self.r0:.6g} must be below L/2={self.box_length / 2:.6g} "
                "for the minimum-image convention"
            )

    @property
    def r0(self) -> float:
        """WCA cutoff and compact-state bond length 2^{1/6}σ."""
        return 2.0 ** (1.0 / 6.0) * self.sigma

    @property
    def dim(self) -> int:
        return 2 * self.n_particles


def wca(r: np.ndarray, params: DimerParams) -> np.ndarray:
    """Truncated, shifted Lennard-Jones energy V_WCA(r)."""
    s6 = (params.sigma / r) ** 6
    inside = 4.0 * params.epsilon * (s6 * s6 - s6) + params.epsilon
    return np.where(r <= params.r0, inside, 0.0)


def wca_derivative(r: np.ndarray, params: DimerParams) -> np.ndarray:
    s6 = (params.sigma / r) ** 6
    inside = 24.0 * params.epsilon / r * (s6 - 2.0 * s6 * s6)
    return np.where(r <= params.r0, inside, 0.0)


def double_well(r: np.ndarray, params: DimerParams) -> np.ndarray:
    """Dimer bond energy V_S(r) = h[1 − (r − r₀ − w)²/w²]²."""
    u = (r - params.r0 - params.w) / params.w
    return params.h * (1.0 - u * u) ** 2


def double_well_derivative(r: np.ndarray, params: DimerParams) -> np.ndarray:
    u = (r - params.r0 - params.w) / params.w
    return -4.0 * params.h * u * (1.0 - u * u) / params.w


def _pair_geometry(
    q: np.ndarray, params: DimerParams
) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-image separation vectors and distances for all ordered pairs."""
    n = params.n_particles
    pos = q.reshape(q.shape[:-1] + (n, 2))
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    diff = diff - params.box_length * np.round(diff / params.box_length)
    r = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    return diff, r


def dimer_solvent(params: DimerParams) -> Target:
    """Total energy of the dimer pair plus WCA solvent, minimum image."""
    n = params.n_particles
    iu, ju = np.triu_indices(n, k=1)
    is_bond = (iu == 0) & (ju == 1)

    def _distances(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        diff, r = _pair_geometry(q, params)
        r_pairs = r[..., iu, ju]
        if np.any(r_pairs < params.distance_floor):
            raise DomainError(
                f"coincident particles (distance < {params.distance_floor:g})"
            )
        return diff, r

    def potential(q: np.ndarray) -> np.ndarray:
        _, r = _distances(q)
        r_pairs = r[..., iu, ju]
        energies = np.where(
            is_bond, double_well(r_pairs, params), wca(r_pairs, params)
        )
        return energies.sum(axis=-1)

    def gradient(q: np.ndarray) -> np.ndarray:
        diff, r = _distances(q)
        # Unit weight V'(r)/r for every ordered pair; the diagonal stays zero
        safe_r = np.where(r > 0, r, 1.0)
        weights = wca_derivative(safe_r, params) / safe_r
        bond = double_well_derivative(safe_r[..., 0, 1], params) / safe_r[..., 0, 1]
        weights[..., 0, 1] = bond
        weights[..., 1, 0] = bond
        idx = np.arange(n)
        weights[..., idx, idx] = 0.0
        grad = np.zeros(diff.shape[:-2] + (2,), dtype=np.float64)
        for j in range(n):
            grad = grad + weights[..., :, j, None] * diff[..., :, j, :]
        return grad.reshape(q.shape)

    return Target(
        name="dimer_solvent",
        domain=Domain(DomainKind.TORUS, params.dim, period=params.box_length),
        beta=params.beta,
        potential_fn=potential,
        gradient_fn=gradient,
        params={
            "n_particles": n,
            "box_length": params.box_length,
            "epsilon": params.epsilon,
            "sigma": params.sigma,
            "h": params.h,
            "w": params.w,
        },
    )


def reaction_coordinate(q: np.ndarray, params: DimerParams) -> np.ndarray:
    """ξ(q) = (|q₁ − q₂| − r₀)/(2w): 0 compact, 1 stretched."""
    q = np.asarray(q, dtype=np.float64)
    delta = q[..., 0:2] - q[..., 2:4]
    delta = delta - params.box_length * np.round(delta / params.box_length)
    r = np.sqrt(delta[..., 0] ** 2 + delta[..., 1] ** 2)
    return (r - params.r0) / (2.0 * params.w)


def dimer_initial_configuration(params: DimerParams) -> np.ndarray:
    """Square-lattice start with the dimer bond at the compact length r₀.

    Particle 0 sits on lattice site 0 and particle 1 at distance r₀ along
    the row; the solvent fills sites 2, 3, ... so nothing overlaps.
    """
    n = params.n_particles
    m = math.ceil(math.sqrt(n + 1))
    spacing = params.box_length / m
    sites = np.array(
        [((k % m) + 0.5, (k // m) + 0.5) for k in range(m * m)], dtype=np.float64
    ) * spacing
    pos = np.empty((n, 2), dtype=np.float64)
    pos[0] = sites[0]
    pos[1] = sites[0] + np.array([params.r0, 0.0])
    pos[2:] = sites[2 : n]
    if spacing < params.r0:
        logger.warning(
            "Lattice spacing %.4g is below the WCA cutoff %.4g; start is dense",
            spacing,
            params.r0,
        )
    return pos.reshape(-1)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def gradient_check(
    target: Target, points: np.ndarray, step: float = GRADIENT_CHECK_STEP
) -> float:
    """Largest relative error between ∇V and central finite differences.

    The per-coordinate step is ``step·(1 + |x|)``; the error at each point is
    normalized by ``max(|∇V|, 1)``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    analytic = target.gradient(points)
    numeric = np.empty_like(points)
    h = step * (1.0 + np.linalg.norm(points, axis=-1))
    for i in range(target.dim):
        shift = np.zeros_like(points)
        shift[:, i] = h
        numeric[:, i] = (
            target.potential(points + shift) - target.potential(points - shift)
        ) / (2.0 * h)
    err = np.linalg.norm(numeric - analytic, axis=-1)
    scale = np.maximum(np.linalg.norm(analytic, axis=-1), 1.0)
    return float(np.max(err / scale))


TARGET_BUILDERS: dict[str, Callable[..., Target]] = {
    "standard_gaussian": standard_gaussian,
    "warped_gaussian": warped_gaussian,
    "periodic_2d": periodic_2d,
    "dimer_solvent": lambda **kw: dimer_solvent(DimerParams(**kw)),
}


def build_target(name: str, params: Mapping[str, object] | None = None) -> Target:
    """Construct a registered target by name with keyword parameters."""
    try:
        builder = TARGET_BUILDERS[name]
    except KeyError:
        raise DomainError(
            f"unknown target {name!r}; choose from {sorted(TARGET_BUILDERS)}"
        ) from None
    try:
        return builder(**dict(params or {}))
    except TypeError as exc:
        raise DomainError(f"bad parameters for target {name!r}: {exc}") from exc
