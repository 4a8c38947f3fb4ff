"""Named observables f evaluated on batches of points."""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .targets import DimerParams, reaction_coordinate
from .utils import matvec, rowdot


@dataclass(frozen=True, eq=False)
class Observable:
    """A scalar function f on the state space, applied row-wise.

    Attributes:
        name: Registry name.
        fn: Batched map ``(..., d) -> (...)``.
        gaussian_mean: Exact π(f) under 𝒩(0, I) when known in closed form.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    gaussian_mean: float | None = None
    params: Mapping[str, object] = field(default_factory=dict)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.fn(np.asarray(x, dtype=np.float64))


def quadratic(M, l=None, k: float = 0.0) -> Observable:
    """f(x) = x·Mx + l·x + k with M symmetrized on input."""
    if M is None:
        raise DomainError("quadratic observable needs a matrix M")
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    d = M.shape[0]
    if M.shape != (d, d):
        raise DomainError(f"M must be square, got shape {M.shape}")
    l = np.zeros(d) if l is None else np.asarray(l, dtype=np.float64)
    if l.shape != (d,):
        raise DomainError(f"l must have length {d}, got shape {l.shape}")
    M = 0.5 * (M + M.T)

    def fn(x: np.ndarray) -> np.ndarray:
        return rowdot(x, matvec(M, x)) + rowdot(x, np.broadcast_to(l, x.shape)) + k

    return Observable(
        name="quadratic",
        fn=fn,
        gaussian_mean=float(np.trace(M)) + k,
        params={"M": M, "l": l, "k": k},
    )


def norm_squared(dim: int | None = None) -> Observable:
    """f(x) = |x|²."""

    def fn(x: np.ndarray) -> np.ndarray:
        return rowdot(x, x)

    return Observable(
        name="norm_squared",
        fn=fn,
        gaussian_mean=None if dim is None else float(dim),
        params={"dim": dim},
    )


def periodic_f() -> Observable:
    """f(x) = 1 + 4sin²(4πx₁) + 4cos²(4πx₂) on the unit torus."""
    four_pi = 4.0 * math.pi

    def fn(x: np.ndarray) -> np.ndarray:
        return (
            1.0
            + 4.0 * np.sin(four_pi * x[..., 0]) ** 2
            + 4.0 * np.cos(four_pi * x[..., 1]) ** 2
        )

    return Observable(name="periodic_f", fn=fn)


def first_coordinate_squared() -> Observable:
    """f(x) = 2x₁², the observable of the 2D rotational Gaussian example."""

    def fn(x: np.ndarray) -> np.ndarray:
        return 2.0 * x[..., 0] ** 2

    return Observable(name="first_coordinate_squared", fn=fn, gaussian_mean=2.0)


def dimer_reaction_coordinate(params: DimerParams) -> Observable:
    return Observable(
        name="reaction_coordinate",
        fn=lambda q: reaction_coordinate(q, params),
    )


def build_observable(
    name: str,
    params: Mapping[str, object] | None = None,
    *,
    dim: int | None = None,
    dimer: DimerParams | None = None,
) -> Observable:
    """Construct a registered observable by name."""
    params = dict(params or {})
    if name == "quadratic":
        if "M" not in params and dim is not None:
            params.setdefault("M", np.zeros((dim, dim)))
        return quadratic(params.get("M"), params.get("l"), float(params.get("k", 0.0)))
    if name == "norm_squared":
        return norm_squared(dim)
    if name == "periodic_f":
        return periodic_f()
    if name == "first_coordinate_squared":
        return first_coordinate_squared()
    if name == "reaction_coordinate":
        if dimer is None:
            raise DomainError("reaction_coordinate needs the dimer_solvent target")
        return dimer_reaction_coordinate(dimer)
    raise DomainError(f"unknown observable {name!r}")
