import csv
import dataclasses
import io
import math

import numpy as np
import pytest

from nrlangevin.config import config_from_mapping, load_config
from nrlangevin.constants import (
    ANALYTIC_COLUMNS,
    DT_GRID_EM,
    EXIT_ALL_BLOWUP,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    SWEEP_COLUMNS,
)
from nrlangevin.errors import ConfigError
from nrlangevin.experiments import (
    ExperimentOutcome,
    analytic,
    build_model,
    format_rows,
    mh_study,
    reference,
    sweep_alpha,
    sweep_dt,
    write_csv,
)
from nrlangevin.gaussian_analytics import polar_example_variance
from nrlangevin.integrators import RngBatch, run_chain
from nrlangevin.main import main
from nrlangevin.perturbations import no_perturbation
from nrlangevin.targets import standard_gaussian


def gaussian_config(**overrides):
    data = {
        "version": 1,
        "target": {"name": "standard_gaussian", "params": {"dim": 2}},
        "observable": "first_coordinate_squared",
        "perturbation": "rotation2d",
        "alphas": [0, 2],
        "dt": 0.05,
        "n_steps": 600,
        "n_chains": 6,
        "seed": 3,
        "threads": 1,
    }
    data.update(overrides)
    return config_from_mapping(data)


def without_timing(rows):
    return [{k: v for k, v in row.items() if k != "wall_seconds"} for row in rows]


class TestAnalytic:
    def test_m1_curve(self, config_dir):
        outcome = analytic(load_config(config_dir / "analytic_m1.yaml"))
        assert outcome.columns == ANALYTIC_COLUMNS
        first = outcome.rows[0]
        assert first["alpha"] == 0.0
        assert first["sigma2"] == pytest.approx(30.0, rel=1e-12)
        assert first["limit_inf"] == pytest.approx(25.0, abs=1e-3)
        assert first["lower_bound"] == pytest.approx(20.0, abs=1e-10)
        sigma2 = [row["sigma2"] for row in outcome.rows]
        assert sigma2 == sorted(sigma2, reverse=True)
        assert not outcome.all_blown_up

    def test_linear_observable_curve(self, config_dir):
        outcome = analytic(load_config(config_dir / "analytic_linear_3d.yaml"))
        assert outcome.rows[0]["sigma2"] == pytest.approx(4.0)
        assert outcome.rows[0]["limit_inf"] == pytest.approx(8.0 / 3.0, abs=1e-6)

    def test_needs_constant_matrix(self):
        config = config_from_mapping(
            {
                "version": 1,
                "target": {"name": "standard_gaussian", "params": {"dim": 2}},
                "observable": {"name": "quadratic", "params": {"M": [[1, 0], [0, 0]]}},
            }
        )
        with pytest.raises(ConfigError, match="constant matrix"):
            analytic(config)


class TestBuildModel:
    def test_default_start_is_the_origin(self):
        model = build_model(gaussian_config())
        np.testing.assert_array_equal(model.initial, [0.0, 0.0])

    def test_problems_become_config_errors(self):
        config = gaussian_config(perturbation="j_linear_3d", initial=[1.0, 2.0, 3.0])
        with pytest.raises(ConfigError) as info:
            build_model(config)
        assert {field for field, _ in info.value.problems} == {"perturbation", "initial"}


class TestSweeps:
    def test_sweep_alpha_rows(self):
        outcome = sweep_alpha(gaussian_config())
        assert outcome.columns == SWEEP_COLUMNS
        assert [row["alpha"] for row in outcome.rows] == [0.0, 2.0]
        for row in outcome.rows:
            assert row["method"] == "ensemble"
            assert row["reference"] == 2.0
            assert row["bias"] == pytest.approx(row["estimate"] - 2.0)
            assert row["gradient_evals"] == 600
            assert row["blowups"] == 0
            assert row["acceptance_rate"] is None
            assert row["ci_low"] < row["estimate"] < row["ci_high"]

    def test_rows_do_not_depend_on_thread_count(self):
        config = gaussian_config()
        serial = sweep_alpha(dataclasses.replace(config, threads=1))
        parallel = sweep_alpha(dataclasses.replace(config, threads=3))
        assert without_timing(serial.rows) == without_timing(parallel.rows)
        assert format_rows(("estimate", "asym_var"), serial.rows) == format_rows(
            ("estimate", "asym_var"), parallel.rows
        )

    def test_seed_changes_the_estimates(self):
        a = sweep_alpha(gaussian_config(seed=1))
        b = sweep_alpha(gaussian_config(seed=2))
        assert a.rows[0]["estimate"] != b.rows[0]["estimate"]

    def test_single_chain_uses_batch_means(self):
        config = gaussian_config(n_chains=1, n_steps=5000, alphas=[1])
        outcome = sweep_alpha(config)
        assert [row["method"] for row in outcome.rows] == ["batch_means"]
        assert outcome.rows[0]["asym_var"] > 0

    def test_sweep_dt_at_fixed_budget(self):
        config = config_from_mapping(
            {
                "version": 1,
                "target": {"name": "standard_gaussian", "params": {"dim": 3}},
                "observable": {"name": "quadratic", "params": {"l": [0.0, 1.0, 1.0]}},
                "perturbation": "j_linear_3d",
                "schemes": ["em", "strang"],
                "alphas": [1.0],
                "dts": [0.05, 0.1],
                "gradient_budget": 600,
                "include_mala_baseline": True,
                "n_chains": 4,
                "seed": 1,
                "threads": 2,
            }
        )
        outcome = sweep_dt(config)
        assert [(r["scheme"], r["alpha"], r["dt"]) for r in outcome.rows] == [
            ("mala", 0.0, 0.05),
            ("mala", 0.0, 0.1),
            ("em", 1.0, 0.05),
            ("em", 1.0, 0.1),
            ("strang", 1.0, 0.05),
            ("strang", 1.0, 0.1),
        ]
        for row in outcome.rows:
            assert row["gradient_evals"] == 600
            assert row["reference"] == 0.0
            assert row["mse"] is not None and row["mse"] >= 0.0
            assert "relative_mse" not in row
        assert outcome.rows[0]["acceptance_rate"] > 0.5

    def test_sweep_dt_default_grid(self):
        config = config_from_mapping(
            {
                "version": 1,
                "target": {"name": "standard_gaussian", "params": {"dim": 3}},
                "observable": {"name": "quadratic", "params": {"l": [0.0, 1.0, 1.0]}},
                "perturbation": "j_linear_3d",
                "alphas": [0.0],
                "gradient_budget": 64,
                "n_chains": 4,
                "threads": 1,
            }
        )
        outcome = sweep_dt(config)
        assert tuple(row["dt"] for row in outcome.rows) == DT_GRID_EM

    def test_sweep_dt_needs_a_reference(self):
        config = config_from_mapping(
            {
                "version": 1,
                "target": {"name": "standard_gaussian", "params": {"dim": 3}},
                "observable": "periodic_f",
                "dts": [0.1],
                "gradient_budget": 100,
            }
        )
        with pytest.raises(ConfigError, match="reference"):
            sweep_dt(config)

    def test_mh_acceptance_falls_with_alpha(self):
        config = gaussian_config(observable="norm_squared", alphas=[0, 2, 10], dt=0.2, n_steps=2000, n_chains=4)
        outcome = mh_study(config)
        assert [row["scheme"] for row in outcome.rows] == ["mala", "mala_nonrev_proposal", "mala_nonrev_proposal"]
        rates = [row["acceptance_rate"] for row in outcome.rows]
        assert rates[0] > rates[1] > rates[2]

    def test_all_chains_blowing_up(self):
        config = gaussian_config(
            target={"name": "standard_gaussian", "params": {"dim": 1}},
            observable="norm_squared",
            perturbation="none",
            alphas=[0],
            dt=2.5,
            n_steps=500,
            n_chains=2,
        )
        outcome = sweep_alpha(config)
        assert outcome.all_blown_up
        row = outcome.rows[0]
        assert row["blowups"] == 2
        assert row["estimate"] is None


class TestReference:
    def test_gaussian_reference_rows(self):
        config = gaussian_config(observable="norm_squared", quadrature={"grid_per_axis": 64})
        outcome = reference(config)
        value, z = outcome.rows
        assert value["observable"] == "norm_squared"
        assert value["value"] == pytest.approx(2.0, abs=1e-8)
        assert z["observable"] == "normalization"
        assert z["value"] == pytest.approx(2.0 * math.pi, rel=1e-8)

    def test_three_dimensional_target(self):
        config = gaussian_config(
            target={"name": "standard_gaussian", "params": {"dim": 3}}, perturbation="none"
        )
        with pytest.raises(ConfigError, match="two-dimensional"):
            reference(config)


class TestCsv:
    def test_write_to_file(self, tmp_path):
        outcome = ExperimentOutcome(("alpha", "estimate", "method"), [{"alpha": 1.0, "estimate": None, "method": "ensemble"}])
        path = tmp_path / "out" / "rows.csv"
        write_csv(outcome, str(path))
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "alpha,estimate,method"
        assert lines[1].endswith(",,ensemble")

    def test_write_to_stdout(self, capsys):
        write_csv(ExperimentOutcome(("alpha",), [{"alpha": 0.5}]))
        out = capsys.readouterr().out
        assert out.splitlines()[0] == "alpha"
        assert float(out.splitlines()[1]) == 0.5


class TestMain:
    def test_analytic_to_stdout(self, tmp_path, capsys, config_dir):
        path = tmp_path / "linear.yaml"
        text = (config_dir / "analytic_linear_3d.yaml").read_text(encoding="utf-8")
        path.write_text(text.replace("output: results/analytic_linear_3d.csv\n", ""), encoding="utf-8")
        assert main(["analytic", "--config", str(path)]) == EXIT_OK
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert tuple(rows[0]) == ANALYTIC_COLUMNS
        assert len(rows) == 7

    def test_out_overrides_config(self, tmp_path, config_dir):
        out = tmp_path / "m1.csv"
        code = main(["analytic", "--config", str(config_dir / "analytic_m1.yaml"), "--out", str(out)])
        assert code == EXIT_OK
        assert out.read_text(encoding="utf-8").startswith("alpha,sigma2")

    def test_config_error_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("version: 2\ntarget: standard_gaussian\nobservable: norm_squared\n", encoding="utf-8")
        assert main(["sweep-alpha", "--config", str(path)]) == EXIT_CONFIG_ERROR
        assert "config error: version" in capsys.readouterr().err

    def test_bad_seed_override(self, config_dir, capsys):
        code = main(["analytic", "--config", str(config_dir / "analytic_m1.yaml"), "--seed", "-1"])
        assert code == EXIT_CONFIG_ERROR
        assert "--seed" in capsys.readouterr().err

    def test_all_blowup_exit_code(self, tmp_path):
        path = tmp_path / "unstable.yaml"
        path.write_text(
            "version: 1\n"
            "target: {name: standard_gaussian, params: {dim: 1}}\n"
            "observable: norm_squared\n"
            "dt: 2.5\nn_steps: 500\nn_chains: 2\n",
            encoding="utf-8",
        )
        out = tmp_path / "rows.csv"
        assert main(["sweep-alpha", "--config", str(path), "--out", str(out), "--threads", "2"]) == EXIT_ALL_BLOWUP
        assert out.exists()


class MomentObserver:
    """Per-chain running sums of the first four powers."""

    def __init__(self, n_chains: int):
        self.sums = np.zeros((4, n_chains))
        self.count = np.zeros(n_chains)

    def observe(self, values, active):
        for k in range(4):
            self.sums[k] += np.where(active, values ** (k + 1), 0.0).sum(axis=0)
        self.count += active.sum(axis=0)

    def moments(self):
        return self.sums / self.count


@pytest.mark.slow
class TestStatisticalReproductions:
    def test_polar_example_variance(self):
        config = gaussian_config(alphas=[0, 2], dt=0.005, n_steps=60_000, n_chains=400, seed=17, threads=4)
        outcome = sweep_alpha(config)
        for row in outcome.rows:
            expected = polar_example_variance(row["alpha"])
            assert row["asym_var"] == pytest.approx(expected, rel=0.25)

    def test_mala_is_exact_and_em_is_not(self):
        gaussian = [0.0, 1.0, 0.0, 3.0]
        n_chains = 40

        def chain_moments(scheme):
            observer = MomentObserver(n_chains)
            run_chain(
                np.zeros(1), scheme, standard_gaussian(1), no_perturbation(), 0.5, 25_000,
                RngBatch.for_chains(31, range(n_chains)), observers=[observer],
                observable=lambda x: x[:, 0], burn_in=500,
            )
            per_chain = observer.moments()
            return per_chain.mean(axis=1), per_chain.std(axis=1, ddof=1) / math.sqrt(n_chains)

        mean, se = chain_moments("mala")
        for k in range(4):
            assert abs(mean[k] - gaussian[k]) < 4.0 * se[k], k
        mean, se = chain_moments("em")
        assert abs(mean[1] - 1.0) > 4.0 * se[1]

    def test_periodic_variance_reduction(self):
        # The gain depends on α/β; Δt is small enough for Euler–Maruyama to
        # stay accurate in the wells at α = 5β
        config = config_from_mapping(
            {
                "version": 1,
                "target": {"name": "periodic_2d", "params": {"beta": 10.0}},
                "observable": "periodic_f",
                "perturbation": "rotation2d",
                "alphas": [0, 10, 50],
                "dt": 1e-5,
                "n_steps": 400_000,
                "n_chains": 200,
                "seed": 4,
                "threads": 4,
            }
        )
        rows = sweep_alpha(config).rows
        assert all(row["blowups"] == 0 for row in rows)
        reversible, matched, strong = (row["asym_var"] for row in rows)
        assert matched < reversible / 1.5
        assert strong < reversible / 10.0

    def test_warped_variance_reduction(self, config_dir):
        config = dataclasses.replace(load_config(config_dir / "warped_sweep_alpha.yaml"), alphas=(0.0, 10.0), output=None)
        rows = sweep_alpha(config).rows
        assert all(row["blowups"] == 0 for row in rows)
        assert rows[1]["asym_var"] < rows[0]["asym_var"] / 20.0

    def test_metropolis_step_undoes_the_gain(self, config_dir):
        config = dataclasses.replace(load_config(config_dir / "warped_mh_study.yaml"), alphas=(0.0, 10.0), output=None)
        rows = mh_study(config).rows
        assert rows[1]["asym_var"] > rows[0]["asym_var"]
        assert rows[1]["acceptance_rate"] < rows[0]["acceptance_rate"]

    def test_nonreversible_samplers_win_at_fixed_budget(self):
        def sweep(schemes, alphas, dts, mala):
            return sweep_dt(
                config_from_mapping(
                    {
                        "version": 1,
                        "target": {"name": "warped_gaussian", "params": {"b": 0.05}},
                        "observable": "norm_squared",
                        "perturbation": "rotation2d",
                        "schemes": schemes,
                        "alphas": alphas,
                        "dts": dts,
                        "gradient_budget": 100_002,
                        "include_mala_baseline": mala,
                        "n_chains": 100,
                        "seed": 6,
                        "threads": 4,
                        "reference": 69.25,
                    }
                )
            ).rows

        def best(rows, scheme, alpha):
            finished = [
                r["mse"] for r in rows if r["scheme"] == scheme and r["alpha"] == alpha and r["blowups"] == 0
            ]
            assert finished, (scheme, alpha)
            return min(finished)

        em_rows = sweep(["em"], [0, 10], [0.03125, 0.0625, 0.125, 0.25, 0.5, 1.0], True)
        split_rows = sweep(["strang"], [10], [0.0625, 0.125], False)

        assert best(em_rows, "em", 10.0) < best(em_rows, "mala", 0.0)
        assert best(em_rows, "em", 10.0) < best(em_rows, "em", 0.0)
        assert best(split_rows, "strang", 10.0) < best(em_rows, "mala", 0.0)
        unstable = [r for r in em_rows if r["scheme"] == "em" and r["alpha"] == 10.0 and r["dt"] == 1.0]
        assert unstable[0]["blowups"] == 100
        assert all(r["blowups"] == 0 for r in split_rows)

    @pytest.mark.parametrize("perturbation", ["dimer_j1", "dimer_j2"])
    def test_dimer_properties(self, perturbation):
        config = config_from_mapping(
            {
                "version": 1,
                "target": {"name": "dimer_solvent", "params": {"n_particles": 8}},
                "observable": "reaction_coordinate",
                "perturbation": perturbation,
                "scheme": "strang",
                "alphas": [0, 10],
                "dt": 2e-5,
                "n_steps": 50_000,
                "n_chains": 8,
                "seed": 41,
                "threads": 4,
            }
        )
        rows = sweep_alpha(config).rows
        assert all(row["blowups"] == 0 for row in rows)
        slow, fast = rows
        half = (slow["ci_high"] - slow["ci_low"]) / 2 + (fast["ci_high"] - fast["ci_low"]) / 2
        assert abs(slow["estimate"] - fast["estimate"]) <= half

    @pytest.mark.parametrize("perturbation", ["dimer_j1", "dimer_j2"])
    def test_dimer_batch_means_variance_does_not_grow(self, config_dir, perturbation):
        config = dataclasses.replace(
            load_config(config_dir / "dimer_batch_means.yaml"),
            n_steps=60_000,
            output=None,
        )
        config = dataclasses.replace(
            config, perturbation=dataclasses.replace(config.perturbation, name=perturbation)
        )
        rows = sweep_alpha(config).rows
        assert [row["method"] for row in rows] == ["batch_means", "batch_means"]
        assert all(row["blowups"] == 0 for row in rows)
        n_batches = math.isqrt(60_000 - 6_000)
        slow, fast = (row["asym_var"] for row in rows)
        spread = 1.96 * math.sqrt(2.0 / (n_batches - 1)) * (slow + fast)
        assert fast <= slow + spread
