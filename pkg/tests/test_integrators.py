import math

import numpy as np
import pytest
import scipy.linalg

from nrlangevin.errors import BlowupError, DomainError
from nrlangevin.estimators import RunningAverage, ensemble_asymptotic_variance
from nrlangevin.integrators import (
    RngBatch,
    RngStream,
    StepBudget,
    em_step,
    initial_state,
    mala_step,
    rk4_flow_step,
    run_chain,
    strang_step,
)
from nrlangevin.perturbations import (
    Drift,
    dimer_rotation_J2,
    linear_flow,
    no_perturbation,
    rotation_2d,
)
from nrlangevin.targets import (
    DimerParams,
    dimer_initial_configuration,
    dimer_solvent,
    periodic_2d,
    standard_gaussian,
    warped_gaussian,
)


def first_coordinate(x):
    return x[:, 0]


def second_moment(x):
    return x[:, 0] ** 2


class TestRandomStreams:
    def test_same_key_same_numbers(self):
        a, b = RngStream(7, 3), RngStream(7, 3)
        np.testing.assert_array_equal(a.normal((5, 2)), b.normal((5, 2)))
        np.testing.assert_array_equal(a.uniform(4), b.uniform(4))

    def test_different_streams_differ(self):
        assert not np.array_equal(RngStream(7, 0).normal(8), RngStream(7, 1).normal(8))

    def test_uniforms_do_not_shift_normals(self):
        a, b = RngStream(1, 0), RngStream(1, 0)
        a.uniform(100)
        np.testing.assert_array_equal(a.normal(3), b.normal(3))

    def test_batch_shapes(self):
        batch = RngBatch.for_chains(0, range(3))
        assert batch.normal(4, 2).shape == (4, 3, 2)
        assert batch.uniform(4).shape == (4, 3, 1)

    def test_empty_batch(self):
        with pytest.raises(DomainError):
            RngBatch([])


class TestEulerMaruyama:
    def test_zero_noise_contracts(self):
        target = standard_gaussian(2)
        state = initial_state(target, [1.0, -2.0], 1, need_potential=False)
        new = em_step(state, Drift(target, no_perturbation()), 0.1, noise=0.0)
        np.testing.assert_allclose(new.x, [[0.9, -1.8]])
        np.testing.assert_allclose(new.grad, new.x)

    def test_charges_one_gradient(self):
        target = standard_gaussian(2)
        budget = StepBudget()
        state = initial_state(target, [0.0, 0.0], 3, need_potential=False)
        em_step(state, Drift(target, no_perturbation()), 0.1, RngBatch.for_chains(0, range(3)), budget=budget)
        assert budget.gradient_evals == 1

    def test_blowup_raises(self):
        target = standard_gaussian(1)
        state = initial_state(target, [1e13], 1, need_potential=False)
        with pytest.raises(BlowupError) as info:
            em_step(state, Drift(target, no_perturbation()), 0.1, noise=0.0, step_index=4)
        assert info.value.step == 4

    def test_needs_randomness(self):
        target = standard_gaussian(1)
        state = initial_state(target, [0.0], 1)
        with pytest.raises(DomainError):
            em_step(state, Drift(target, no_perturbation()), 0.1)

    def test_rejects_nonpositive_dt(self):
        target = standard_gaussian(1)
        state = initial_state(target, [0.0], 1)
        with pytest.raises(DomainError, match="dt"):
            em_step(state, Drift(target, no_perturbation()), 0.0, noise=0.0)


class TestMala:
    def test_proposal_equal_to_current_point_is_accepted(self):
        target = standard_gaussian(1)
        x, dt = 0.5, 0.2
        xi = dt * x / math.sqrt(2.0 * dt)
        state = initial_state(target, [x], 1)
        new, accepted = mala_step(state, target, dt, noise=xi, uniform=0.999)
        assert accepted[0]
        np.testing.assert_allclose(new.x, [[x]])

    def test_large_move_is_rejected(self):
        # log r = -12.5 for this proposal
        target = standard_gaussian(1)
        state = initial_state(target, [0.0], 1)
        new, accepted = mala_step(state, target, 0.5, noise=10.0, uniform=0.5)
        assert not accepted[0]
        np.testing.assert_array_equal(new.x, [[0.0]])
        assert new.potential[0] == 0.0

    def test_accepts_when_uniform_is_tiny(self):
        target = standard_gaussian(1)
        state = initial_state(target, [0.0], 1)
        new, accepted = mala_step(state, target, 0.5, noise=1.0, uniform=1e-300)
        assert accepted[0]
        np.testing.assert_allclose(new.x, [[1.0]])

    def test_nonreversible_proposal_uses_perturbation(self):
        target = standard_gaussian(2)
        state = initial_state(target, [1.0, 0.0], 1)
        p = linear_flow(rotation_2d(), alpha=1.0)
        rev, _ = mala_step(state, target, 0.1, noise=0.0, uniform=1e-300)
        nonrev, _ = mala_step(state, target, 0.1, perturbation=p, noise=0.0, uniform=1e-300)
        np.testing.assert_allclose(rev.x, [[0.9, 0.0]])
        np.testing.assert_allclose(nonrev.x, [[0.9, 0.1]])
        positional, _ = mala_step(state, target, 0.1, p, noise=0.0, uniform=1e-300)
        np.testing.assert_array_equal(positional.x, nonrev.x)

    def test_potential_is_filled_in(self):
        target = standard_gaussian(2)
        state = initial_state(target, [1.0, 1.0], 2, need_potential=False)
        new, _ = mala_step(state, target, 0.1, rng=RngBatch.for_chains(0, [0, 1]))
        new.check_cache(target)


class TestFlow:
    def test_rk4_order(self):
        J = rotation_2d().entries
        x0 = np.array([[1.0, 0.5]])
        exact = x0 @ scipy.linalg.expm(J).T

        def gamma(z):
            return z @ J.T

        def error(n):
            x = x0
            for _ in range(n):
                x = rk4_flow_step(x, gamma, 1.0 / n)
            return np.max(np.abs(x - exact))

        assert error(10) / error(20) > 12.0

    def test_rk4_conserves_potential_to_fifth_order(self, rng):
        target = periodic_2d()
        J = rotation_2d().entries
        points = rng.uniform(0.0, 1.0, size=(20, 2))

        def gamma(z):
            return target.gradient(z) @ J.T

        dts = np.geomspace(3e-4, 3e-3, 6)
        drift = [
            np.mean(np.abs(target.potential(rk4_flow_step(points, gamma, dt)) - target.potential(points)))
            for dt in dts
        ]
        slope = np.polyfit(np.log(dts), np.log(drift), 1)[0]
        assert 4.7 <= slope <= 5.3

    def test_rk4_blowup(self):
        with pytest.raises(BlowupError):
            rk4_flow_step(np.array([[1e13, 0.0]]), lambda z: z, 0.1)

    def test_strang_charges_six_gradients(self):
        target = standard_gaussian(2)
        budget = StepBudget()
        state = initial_state(target, [0.3, -0.2], 2)
        new = strang_step(
            state,
            target,
            linear_flow(rotation_2d(), 1.0),
            0.1,
            RngBatch.for_chains(0, [0, 1]),
            budget=budget,
        )
        assert budget.gradient_evals == 6
        new.check_cache(target)

    def test_strang_without_noise_rotates(self):
        target = standard_gaussian(2)
        state = initial_state(target, [1.0, 0.0], 1)
        p = linear_flow(rotation_2d(), 2.0)
        # with zero noise and forced acceptance only the flow and the
        # reversible contractions act; |x| shrinks by (1 - dt/2)^2
        new = strang_step(state, target, p, 0.1, noise=0.0, uniform=1e-300)
        assert np.linalg.norm(new.x) == pytest.approx(0.95**2, rel=1e-5)


class TestRunChain:
    @pytest.mark.parametrize("scheme, cost", [("em", 1), ("mala", 1), ("mala_nonrev_proposal", 1), ("strang", 6)])
    def test_gradient_budget(self, scheme, cost):
        target = standard_gaussian(2)
        result = run_chain(
            np.zeros(2),
            scheme,
            target,
            linear_flow(rotation_2d(), 1.0),
            0.05,
            50,
            RngBatch.for_chains(0, range(4)),
        )
        assert result.gradient_evals == 50 * cost
        assert not result.partial
        result.final_state.check_cache(target)

    def test_acceptance_tracking(self):
        result = run_chain(
            np.zeros(1), "mala", standard_gaussian(1), no_perturbation(), 0.1, 200,
            RngBatch.for_chains(3, [0]),
        )
        assert result.attempts == 200
        assert 0.5 < result.acceptance_rate[0] <= 1.0
        em = run_chain(
            np.zeros(1), "em", standard_gaussian(1), no_perturbation(), 0.1, 10,
            RngBatch.for_chains(3, [0]),
        )
        assert em.acceptance_rate is None

    def test_chains_do_not_depend_on_batching(self):
        target = warped_gaussian(0.05)
        p = linear_flow(rotation_2d(), 5.0)
        start = np.array([0.0, 5.0])

        def run(ids):
            acc = RunningAverage(len(ids))
            res = run_chain(
                start, "strang", target, p, 0.05, 1500, RngBatch.for_chains(11, ids),
                observers=[acc], observable=first_coordinate,
            )
            return res.final_state.x, acc.mean

        x_all, mean_all = run([0, 1, 2, 3])
        x_a, mean_a = run([0, 1])
        x_b, mean_b = run([2, 3])
        np.testing.assert_array_equal(x_all, np.vstack([x_a, x_b]))
        np.testing.assert_array_equal(mean_all, np.concatenate([mean_a, mean_b]))

    def test_burn_in_is_not_observed(self):
        acc = RunningAverage(2)
        run_chain(
            np.zeros(1), "em", standard_gaussian(1), no_perturbation(), 0.1, 2000,
            RngBatch.for_chains(0, [0, 1]), observers=[acc], observable=first_coordinate,
            burn_in=1500,
        )
        np.testing.assert_array_equal(acc.count, [500, 500])

    def test_blowup_freezes_and_masks(self):
        acc = RunningAverage(1)
        result = run_chain(
            np.array([1.0]), "em", standard_gaussian(1), no_perturbation(), 2.5, 200,
            RngBatch.for_chains(0, [0]), observers=[acc], observable=first_coordinate,
        )
        assert result.partial
        step = int(result.blowup_step[0])
        assert 0 < step < 200
        assert acc.count[0] == step
        assert np.isfinite(acc.mean[0])

    def test_torus_positions_stay_wrapped(self):
        p = linear_flow(rotation_2d(), 1.0)
        for scheme in ("em", "mala", "strang"):
            result = run_chain(
                np.array([0.5, 0.5]), scheme, periodic_2d(10.0), p, 0.01, 300,
                RngBatch.for_chains(2, range(3)),
            )
            x = result.final_state.x
            assert np.all((x >= 0.0) & (x < 1.0))

    def test_short_dimer_run(self):
        params = DimerParams()
        target = dimer_solvent(params)
        p = linear_flow(dimer_rotation_J2(params.n_particles), 1.0)
        for scheme in ("em", "strang"):
            result = run_chain(
                dimer_initial_configuration(params), scheme, target, p, 1e-3, 20,
                RngBatch.for_chains(0, [0, 1]),
            )
            assert not result.partial
            assert np.all(np.isfinite(result.final_state.x))

    def test_argument_checks(self):
        target = standard_gaussian(1)
        rng = RngBatch.for_chains(0, [0])
        with pytest.raises(DomainError, match="unknown scheme"):
            run_chain(np.zeros(1), "leapfrog", target, no_perturbation(), 0.1, 1, rng)
        with pytest.raises(DomainError, match="observable"):
            run_chain(np.zeros(1), "em", target, no_perturbation(), 0.1, 1, rng, observers=[RunningAverage()])
        with pytest.raises(DomainError, match="dimension"):
            run_chain(np.zeros(3), "em", target, no_perturbation(), 0.1, 1, rng)


@pytest.mark.slow
class TestStationarity:
    def test_mala_targets_the_gaussian_exactly(self):
        acc = RunningAverage(32)
        run_chain(
            np.zeros(1), "mala", standard_gaussian(1), no_perturbation(), 0.5, 40_000,
            RngBatch.for_chains(5, range(32)), observers=[acc], observable=second_moment,
            burn_in=1000,
        )
        assert float(np.mean(acc.mean)) == pytest.approx(1.0, abs=0.05)

    def test_euler_maruyama_is_biased(self):
        # the EM chain is stationary at variance 2 / (2 - dt) = 4/3 for dt = 0.5
        acc = RunningAverage(32)
        run_chain(
            np.zeros(1), "em", standard_gaussian(1), no_perturbation(), 0.5, 40_000,
            RngBatch.for_chains(5, range(32)), observers=[acc], observable=second_moment,
            burn_in=1000,
        )
        value = float(np.mean(acc.mean))
        assert value == pytest.approx(4.0 / 3.0, abs=0.05)
        assert abs(value - 1.0) > 0.2

    def test_strang_and_em_agree_without_perturbation(self):
        target = standard_gaussian(2)
        n_chains, dt = 40, 1e-3

        def estimate(scheme, seed, n_steps=50_000):
            acc = RunningAverage(n_chains)
            run_chain(
                np.zeros(2), scheme, target, linear_flow(rotation_2d(), 0.0), dt, n_steps,
                RngBatch.for_chains(seed, range(n_chains)), observers=[acc],
                observable=lambda x: np.sum(x * x, axis=1), burn_in=n_steps // 10,
            )
            return ensemble_asymptotic_variance(acc.mean, T=0.9 * n_steps * dt)

        em = estimate("em", 8)
        strang = estimate("strang", 9)
        half = (em.ci_high - em.ci_low) / 2 + (strang.ci_high - strang.ci_low) / 2
        assert abs(em.estimate - strang.estimate) <= half
