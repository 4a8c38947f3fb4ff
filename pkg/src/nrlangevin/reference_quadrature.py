"""Reference values π(f) for two-dimensional targets by tensor trapezoid rules.

On the torus the periodic trapezoid rule over one period is used; on the
plane the integrals run over a box of ``n_std`` marginal standard
deviations given by the target's ``box_fn``.  With the default of 12 the
neglected Gaussian tail mass is below 1e−30, well under tol/10.

Each level compares the ratio ∬ f e^{−βV} / ∬ e^{−βV} on n and 2n
intervals per axis and doubles n until the difference meets the tolerance.
The n and 2n grids share every node of the coarser one, so agreement only
counts once no single node of the finer grid carries more than
``QUADRATURE_MAX_NODE_MASS`` of the total weight.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .constants import (
    QUADRATURE_DEFAULT_GRID,
    QUADRATURE_DEFAULT_N_STD,
    QUADRATURE_DEFAULT_TOL,
    QUADRATURE_MAX_GRID,
    QUADRATURE_MAX_NODE_MASS,
    QUADRATURE_ROW_CHUNK,
)
from .errors import DomainError, SolverError
from .targets import Target

logger = logging.getLogger(__name__)

_SHIFT_SEARCH_GRID = 65


@dataclass(frozen=True)
class QuadratureSpec:
    """Resolution and accuracy of a reference computation.

    Attributes:
        grid_per_axis: Starting number of intervals per axis.
        n_std: Plane truncation in marginal standard deviations.
        tol: Accepted |ratio(2n) − ratio(n)|, relative to max(1, |value|).
        max_grid: Finest grid tried before giving up.
        box: Explicit ``(2, 2)`` bounds overriding the target's box.
    """

    grid_per_axis: int = QUADRATURE_DEFAULT_GRID
    n_std: float = QUADRATURE_DEFAULT_N_STD
    tol: float = QUADRATURE_DEFAULT_TOL
    max_grid: int = QUADRATURE_MAX_GRID
    box: tuple[tuple[float, float], tuple[float, float]] | None = None

    def __post_init__(self) -> None:
        if self.grid_per_axis < 2:
            raise DomainError("grid_per_axis must be >= 2")
        if self.max_grid < self.grid_per_axis:
            raise DomainError("max_grid must be >= grid_per_axis")
        if not self.tol > 0:
            raise DomainError("tol must be > 0")
        if not self.n_std > 0:
            raise DomainError("n_std must be > 0")


class QuadratureResult(NamedTuple):
    value: float
    error: float


class _Level(NamedTuple):
    value: float
    peak_mass: float


def _axes(target: Target, spec: QuadratureSpec, n: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Nodes and trapezoid weights per axis for n intervals."""
    if target.domain.is_torus:
        period = target.domain.period
        nodes = np.arange(n, dtype=np.float64) * (period / n)
        weights = np.full(n, period / n)
        return [nodes, nodes], [weights, weights]
    box = np.asarray(spec.box) if spec.box is not None else None
    if box is None:
        if target.box_fn is None:
            raise DomainError(f"target {target.name!r} has no integration box")
        box = target.box_fn(spec.n_std)
    nodes, weights = [], []
    for lo, hi in box:
        x = np.linspace(lo, hi, n + 1)
        w = np.full(n + 1, (hi - lo) / n)
        w[0] *= 0.5
        w[-1] *= 0.5
        nodes.append(x)
        weights.append(w)
    return nodes, weights


def _potential_shift(target: Target, spec: QuadratureSpec) -> float:
    """min V on a coarse grid, subtracted before exponentiating."""
    (x1, x2), _ = _axes(target, spec, _SHIFT_SEARCH_GRID - 1)
    grid = np.stack(np.meshgrid(x1, x2, indexing="ij"), axis=-1)
    return float(np.min(target.potential(grid)))


def _integrals(
    target: Target,
    f: Callable[[np.ndarray], np.ndarray] | None,
    spec: QuadratureSpec,
    n: int,
    shift: float,
) -> tuple[float, float, float]:
    """∬ e^{−β(V−shift)}, ∬ f e^{−β(V−shift)} and the largest node weight."""
    (x1, x2), (w1, w2) = _axes(target, spec, n)
    z_parts, f_parts = [], []
    peak = 0.0
    for start in range(0, x1.size, QUADRATURE_ROW_CHUNK):
        rows = slice(start, start + QUADRATURE_ROW_CHUNK)
        grid = np.stack(np.meshgrid(x1[rows], x2, indexing="ij"), axis=-1)
        density = np.exp(-target.beta * (target.potential(grid) - shift))
        weighted = density * w1[rows, None] * w2[None, :]
        z_parts.append(np.sum(weighted))
        peak = max(peak, float(np.max(weighted)))
        if f is not None:
            f_parts.append(np.sum(weighted * f(grid)))
    z = float(np.sum(z_parts))
    fz = float(np.sum(f_parts)) if f is not None else 0.0
    return z, fz, peak


def _refine(
    target: Target,
    spec: QuadratureSpec,
    quantity: Callable[[int], _Level],
    label: str,
) -> QuadratureResult:
    if target.dim != 2:
        raise DomainError(f"quadrature is two-dimensional only, target has dim {target.dim}")
    n = spec.grid_per_axis
    coarse = quantity(n).value
    error = float("inf")
    level: _Level | None = None
    while 2 * n <= spec.max_grid:
        level = quantity(2 * n)
        fine = level.value
        error = abs(fine - coarse)
        resolved = level.peak_mass <= QUADRATURE_MAX_NODE_MASS
        logger.debug(
            "%s on %s: n=%d value=%.16g error=%.3e peak node mass=%.3f",
            label,
            target.name,
            2 * n,
            fine,
            error,
            level.peak_mass,
        )
        if resolved and error <= spec.tol * max(1.0, abs(fine)):
            return QuadratureResult(fine, error)
        coarse, n = fine, 2 * n
    if level is not None and level.peak_mass > QUADRATURE_MAX_NODE_MASS:
        raise SolverError(
            f"quadrature for {label} on {target.name} does not resolve the density "
            f"by grid {n} (one node holds {level.peak_mass:.0%} of the mass)",
            achieved=error,
        )
    logger.warning(
        "%s on %s did not reach tol %.1e by grid %d (error %.3e)",
        label,
        target.name,
        spec.tol,
        n,
        error,
    )
    raise SolverError(
        f"quadrature for {label} did not converge (achieved {error:.3e}, tol {spec.tol:.1e})",
        achieved=error,
    )


def expectation_2d(
    target: Target,
    f: Callable[[np.ndarray], np.ndarray],
    spec: QuadratureSpec | None = None,
) -> QuadratureResult:
    """π(f) with an error estimate from the last grid doubling."""
    spec = spec or QuadratureSpec()
    if target.dim != 2:
        raise DomainError(f"quadrature is two-dimensional only, target has dim {target.dim}")
    shift = _potential_shift(target, spec)

    def ratio(n: int) -> _Level:
        z, fz, peak = _integrals(target, f, spec, n, shift)
        return _Level(fz / z, peak / z)

    result = _refine(target, spec, ratio, "expectation")
    logger.info("Reference value on %s: %.16g (error %.2e)", target.name, *result)
    return result


def normalization_2d(target: Target, spec: QuadratureSpec | None = None) -> QuadratureResult:
    """Z = ∬ e^{−βV}; diagnostics only."""
    spec = spec or QuadratureSpec()
    if target.dim != 2:
        raise DomainError(f"quadrature is two-dimensional only, target has dim {target.dim}")
    shift = _potential_shift(target, spec)
    scale = float(np.exp(-target.beta * shift))

    def z_value(n: int) -> _Level:
        z, _, peak = _integrals(target, None, spec, n, shift)
        return _Level(z * scale, peak / z)

    return _refine(target, spec, z_value, "normalization")
