import math

import numpy as np
import pytest

from nrlangevin.errors import DomainError, SolverError
from nrlangevin.reference_quadrature import QuadratureSpec, expectation_2d, normalization_2d
from nrlangevin.targets import (
    Domain,
    DomainKind,
    Target,
    periodic_2d,
    standard_gaussian,
    warped_gaussian,
)


def squared_norm(x):
    return x[..., 0] ** 2 + x[..., 1] ** 2


def flat_torus() -> Target:
    return Target(
        name="flat_torus",
        domain=Domain(DomainKind.TORUS, 2, period=1.0),
        beta=1.0,
        potential_fn=lambda x: np.zeros(x.shape[:-1]),
        gradient_fn=np.zeros_like,
    )


class TestGaussian:
    def test_second_moment(self):
        result = expectation_2d(standard_gaussian(2), lambda x: x[..., 0] ** 2)
        assert result.value == pytest.approx(1.0, abs=1e-10)
        assert result.error <= 1e-8

    def test_normalization(self):
        result = normalization_2d(standard_gaussian(2))
        assert result.value == pytest.approx(2.0 * math.pi, rel=1e-10)

    def test_explicit_box(self):
        spec = QuadratureSpec(box=((-10.0, 10.0), (-10.0, 10.0)))
        result = expectation_2d(standard_gaussian(2), squared_norm, spec)
        assert result.value == pytest.approx(2.0, abs=1e-9)


class TestWarped:
    @pytest.fixture
    def spec(self):
        return QuadratureSpec(tol=1e-6)

    def test_second_moment(self, spec):
        result = expectation_2d(warped_gaussian(0.05), squared_norm, spec)
        assert result.value == pytest.approx(69.25, rel=1e-5)

    def test_normalization(self, spec):
        result = normalization_2d(warped_gaussian(0.05), spec)
        assert result.value == pytest.approx(10.0 * math.pi, rel=1e-5)


class TestTorus:
    def test_flat_torus_has_unit_mass(self):
        assert normalization_2d(flat_torus(), QuadratureSpec(grid_per_axis=8)).value == pytest.approx(1.0)

    def test_symmetric_observable_vanishes(self):
        # x₁ ↦ 1/2 − x₁ leaves V unchanged and flips cos(2πx₁)
        result = expectation_2d(
            periodic_2d(10.0), lambda x: np.cos(2.0 * np.pi * x[..., 0]), QuadratureSpec(grid_per_axis=64)
        )
        assert result.value == pytest.approx(0.0, abs=1e-10)

    def test_resolution_independent(self):
        target = periodic_2d(10.0)

        def f(x):
            return np.sin(2.0 * np.pi * x[..., 1]) ** 2

        coarse = expectation_2d(target, f, QuadratureSpec(grid_per_axis=64))
        fine = expectation_2d(target, f, QuadratureSpec(grid_per_axis=512, max_grid=1024))
        assert coarse.value == pytest.approx(fine.value, abs=1e-7)


class TestFailures:
    def test_three_dimensional_target(self):
        with pytest.raises(DomainError, match="two-dimensional"):
            expectation_2d(standard_gaussian(3), lambda x: x[..., 0])

    def test_no_convergence(self):
        spec = QuadratureSpec(grid_per_axis=16, max_grid=32, tol=1e-14)
        with pytest.raises(SolverError, match="did not converge") as info:
            expectation_2d(standard_gaussian(2), lambda x: x[..., 0] ** 2, spec)
        assert info.value.achieved > 0

    @pytest.mark.parametrize("max_grid", [8, 64])
    def test_coarse_grid_does_not_fake_convergence(self, max_grid):
        # one node carries nearly all the mass on both coarse grids, so they agree exactly
        spec = QuadratureSpec(grid_per_axis=4, max_grid=max_grid)
        with pytest.raises(SolverError):
            expectation_2d(warped_gaussian(0.05), squared_norm, spec)

    def test_unresolved_grid_is_reported(self):
        spec = QuadratureSpec(grid_per_axis=4, max_grid=8, tol=1.0)
        with pytest.raises(SolverError, match="does not resolve"):
            expectation_2d(warped_gaussian(0.05), squared_norm, spec)

    def test_invalid_spec(self):
        with pytest.raises(DomainError):
            QuadratureSpec(grid_per_axis=1)
        with pytest.raises(DomainError):
            QuadratureSpec(grid_per_axis=64, max_grid=32)
        with pytest.raises(DomainError):
            QuadratureSpec(tol=0.0)
