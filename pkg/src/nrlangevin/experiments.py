"""Config-driven experiments producing CSV rows.

Chains of a cell are split into contiguous chunks run on a thread pool;
each chunk stores its per-chain statistics in a ``ResultsStore`` and the
cell is merged in chain-index order, so rows do not depend on the thread
count.
"""

from __future__ import annotations

import csv
import logging
import os
import sys
import time
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, validate_for
from .constants import (
    ANALYTIC_COLUMNS,
    DT_GRID_EM,
    DT_GRID_SPLITTING,
    REFERENCE_COLUMNS,
    SCHEME_COSTS,
    SWEEP_COLUMNS,
)
from .errors import ConfigError, DomainError
from .estimators import (
    BatchMeansState,
    RunningAverage,
    VarianceReport,
    batch_means_variance,
    burn_in_steps,
    ensemble_asymptotic_variance,
    mse,
)
from .gaussian_analytics import variance_curve
from .integrators import RngBatch, run_chain
from .observables import Observable, build_observable
from .perturbations import Perturbation, PerturbationKind, build_perturbation
from .reference_quadrature import QuadratureSpec, expectation_2d, normalization_2d
from .results_store import CellResult, ChunkResult, ResultsStore
from .targets import DimerParams, Target, build_target, dimer_initial_configuration
from .utils import format_float

logger = logging.getLogger(__name__)


@dataclass
class ExperimentOutcome:
    """Rows of one subcommand plus whether every simulated cell blew up."""

    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    n_cells: int = 0
    n_blown_cells: int = 0

    @property
    def all_blown_up(self) -> bool:
        return self.n_cells > 0 and self.n_blown_cells == self.n_cells


@dataclass(frozen=True)
class Model:
    """Objects built from a config: target, observable, start point."""

    target: Target
    observable: Observable
    initial: np.ndarray
    dimer: DimerParams | None = None

    def perturbation(self, config: ExperimentConfig, alpha: float) -> Perturbation:
        return build_perturbation(
            config.perturbation.name,
            dict(config.perturbation.params),
            target=self.target,
            alpha=alpha,
        )


def build_model(config: ExperimentConfig) -> Model:
    """Instantiate the configured target and observable.

    ``DomainError``s are reported as ``ConfigError`` on the offending section.
    """
    problems = []
    target = observable = None
    dimer = None
    try:
        target = build_target(config.target.name, dict(config.target.params))
        if target.name == "dimer_solvent":
            dimer = DimerParams(**dict(config.target.params))
    except DomainError as exc:
        problems.append(("target", str(exc)))
    if target is not None:
        try:
            observable = build_observable(
                config.observable.name,
                dict(config.observable.params),
                dim=target.dim,
                dimer=dimer,
            )
        except DomainError as exc:
            problems.append(("observable", str(exc)))
        try:
            build_perturbation(
                config.perturbation.name,
                dict(config.perturbation.params),
                target=target,
            )
        except DomainError as exc:
            problems.append(("perturbation", str(exc)))
    initial = None
    if target is not None:
        if config.initial is not None:
            initial = np.asarray(config.initial, dtype=np.float64)
            if initial.shape != (target.dim,):
                problems.append(("initial", f"must have {target.dim} entries"))
        elif dimer is not None:
            initial = dimer_initial_configuration(dimer)
        else:
            initial = np.zeros(target.dim)
    if problems:
        raise ConfigError(problems)
    return Model(target=target, observable=observable, initial=initial, dimer=dimer)


# ---------------------------------------------------------------------------
# Cell simulation
# ---------------------------------------------------------------------------


def _chunks(n_chains: int, n_workers: int) -> list[range]:
    """Split chain indices into at most ``n_workers`` contiguous ranges."""
    n_workers = max(1, min(n_workers, n_chains))
    bounds = np.linspace(0, n_chains, n_workers + 1).round().astype(int)
    return [range(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _run_chunk(
    chains: range,
    model: Model,
    perturbation: Perturbation,
    scheme: str,
    dt: float,
    n_steps: int,
    burn_in: int,
    seed: int,
    batch_means: bool,
) -> ChunkResult:
    rng = RngBatch.for_chains(seed, chains)
    average = RunningAverage(len(chains))
    observers = [average]
    batches = None
    if batch_means and chains.start == 0:
        batches = BatchMeansState.for_samples(max(1, n_steps - burn_in), dt, len(chains))
        observers.append(batches)
    result = run_chain(
        model.initial,
        scheme,
        model.target,
        perturbation,
        dt,
        n_steps,
        rng,
        observers=observers,
        observable=model.observable,
        burn_in=burn_in,
    )
    return ChunkResult(
        chain_start=chains.start,
        means=average.mean.copy(),
        counts=average.count.copy(),
        blowup_step=result.blowup_step,
        accepted=result.accepted,
        attempts=result.attempts,
        gradient_evals=result.gradient_evals,
        batches=batches,
    )


def simulate_cell(
    config: ExperimentConfig,
    model: Model,
    perturbation: Perturbation,
    scheme: str,
    dt: float,
    n_steps: int,
    store: ResultsStore | None = None,
) -> CellResult:
    """Run ``config.n_chains`` chains of one (α, Δt, scheme) cell."""
    store = store or ResultsStore()
    key = (scheme, perturbation.alpha, dt)
    burn_in = burn_in_steps(n_steps, config.burn_in_fraction)
    chunks = _chunks(config.n_chains, config.threads)
    logger.info(
        "Cell scheme=%s alpha=%g dt=%g: %d chains x %d steps (%d burn-in)",
        scheme,
        perturbation.alpha,
        dt,
        config.n_chains,
        n_steps,
        burn_in,
    )

    def work(chains: range) -> None:
        logger.debug("Worker starting chains %d..%d", chains.start, chains.stop - 1)
        try:
            chunk = _run_chunk(
                chains,
                model,
                perturbation,
                scheme,
                dt,
                n_steps,
                burn_in,
                config.seed,
                config.batch_means or config.n_chains == 1,
            )
        except Exception:
            logger.exception("Worker failed on chains %d..%d", chains.start, chains.stop - 1)
            raise
        store.append(key, chunk)

    if len(chunks) == 1:
        work(chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            for future in [pool.submit(work, c) for c in chunks]:
                future.result()
    return store.merged(key)


def _variance_reports(cell: CellResult, dt: float) -> list[VarianceReport]:
    reports = []
    ok = ~cell.blown_up
    if ok.sum() >= 2:
        kept = int(cell.counts[ok][0])
        reports.append(ensemble_asymptotic_variance(cell.means[ok], kept * dt))
    if cell.batches is not None and not cell.blown_up[0]:
        try:
            reports.append(batch_means_variance(cell.batches, float(cell.means[0])))
        except DomainError as exc:
            logger.warning("Batch means skipped: %s", exc)
    return reports


def _stat_fields(report: VarianceReport | None) -> dict:
    if report is None:
        return {"method": "", "estimate": None, "asym_var": None, "ci_low": None, "ci_high": None}
    return {
        "method": report.method.value,
        "estimate": report.estimate,
        "asym_var": report.asym_var,
        "ci_low": report.ci_low,
        "ci_high": report.ci_high,
    }


def _cell_rows(
    cell: CellResult,
    *,
    alpha: float,
    dt: float,
    scheme: str,
    reference: float | None,
    wall_seconds: float,
    with_mse: bool = False,
) -> list[dict]:
    base = {
        "alpha": alpha,
        "dt": dt,
        "scheme": scheme,
        "reference": reference,
        "acceptance_rate": cell.acceptance_rate,
        "blowups": int(cell.blown_up.sum()),
        "gradient_evals": cell.gradient_evals,
        "wall_seconds": wall_seconds,
    }
    if with_mse and reference is not None:
        absolute = mse(cell.means, reference, blown_up=cell.blown_up)
        base["mse"] = absolute.value
        if reference != 0.0:
            base["relative_mse"] = mse(
                cell.means, reference, blown_up=cell.blown_up, relative=True
            ).value
    reports = _variance_reports(cell, dt) or [None]
    rows = []
    for report in reports:
        row = dict(base, **_stat_fields(report))
        if report is not None and reference is not None:
            row["bias"] = report.estimate - reference
        rows.append(row)
    return rows


def _reference_for(config: ExperimentConfig, model: Model, required: bool) -> float | None:
    if config.reference is not None:
        return config.reference
    if model.target.name == "standard_gaussian" and model.observable.gaussian_mean is not None:
        return model.observable.gaussian_mean
    if model.target.dim == 2:
        return expectation_2d(model.target, model.observable, _quadrature_spec(config)).value
    if required:
        raise ConfigError(
            [
                (
                    "reference",
                    f"no reference value for the {model.target.dim}-dimensional "
                    f"{model.target.name!r} target; give 'reference' or use the "
                    "property checks of sweep-alpha instead",
                )
            ]
        )
    return None


def _quadrature_spec(config: ExperimentConfig) -> QuadratureSpec:
    q = config.quadrature
    return QuadratureSpec(grid_per_axis=q.grid_per_axis, n_std=q.n_std, tol=q.tol)


def _step_dt(config: ExperimentConfig) -> float:
    return config.dt if config.dt is not None else config.dts[0]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def sweep_alpha(config: ExperimentConfig) -> ExperimentOutcome:
    """Variance estimates over the α grid for each configured scheme."""
    validate_for(config, "sweep-alpha")
    model = build_model(config)
    reference = _reference_for(config, model, required=False)
    dt = _step_dt(config)
    outcome = ExperimentOutcome(SWEEP_COLUMNS)
    store = ResultsStore()
    for scheme in config.schemes:
        for alpha in config.alphas:
            start = time.perf_counter()
            cell = simulate_cell(
                config,
                model,
                model.perturbation(config, alpha),
                scheme,
                dt,
                config.steps_for(scheme),
                store,
            )
            elapsed = time.perf_counter() - start
            outcome.rows.extend(
                _cell_rows(
                    cell, alpha=alpha, dt=dt, scheme=scheme, reference=reference, wall_seconds=elapsed
                )
            )
            outcome.n_cells += 1
            outcome.n_blown_cells += bool(cell.blown_up.all())
    return outcome


def sweep_dt(config: ExperimentConfig) -> ExperimentOutcome:
    """MSE over the Δt grid at a fixed gradient budget."""
    validate_for(config, "sweep-dt")
    model = build_model(config)
    reference = _reference_for(config, model, required=True)
    cells: list[tuple[str, float]] = [(s, a) for s in config.schemes for a in config.alphas]
    if config.include_mala_baseline and "mala" not in config.schemes:
        cells.insert(0, ("mala", 0.0))
    dts = config.dts or (DT_GRID_SPLITTING if "strang" in config.schemes else DT_GRID_EM)
    outcome = ExperimentOutcome(SWEEP_COLUMNS)
    store = ResultsStore()
    for scheme, alpha in cells:
        n_steps = config.steps_for(scheme)
        for dt in dts:
            start = time.perf_counter()
            cell = simulate_cell(
                config, model, model.perturbation(config, alpha), scheme, dt, n_steps, store
            )
            elapsed = time.perf_counter() - start
            if cell.gradient_evals != n_steps * SCHEME_COSTS[scheme]:
                raise AssertionError(
                    f"{scheme} used {cell.gradient_evals} gradient evaluations for {n_steps} steps"
                )
            outcome.rows.extend(
                _cell_rows(
                    cell,
                    alpha=alpha,
                    dt=dt,
                    scheme=scheme,
                    reference=reference,
                    wall_seconds=elapsed,
                    with_mse=True,
                )
            )
            outcome.n_cells += 1
            outcome.n_blown_cells += bool(cell.blown_up.all())
    return outcome


def mh_study(config: ExperimentConfig) -> ExperimentOutcome:
    """MALA with the nonreversible drift in its proposal, over the α grid."""
    validate_for(config, "mh-study")
    model = build_model(config)
    reference = _reference_for(config, model, required=False)
    dt = _step_dt(config)
    outcome = ExperimentOutcome(SWEEP_COLUMNS)
    store = ResultsStore()
    for alpha in config.alphas:
        scheme = "mala" if alpha == 0.0 else "mala_nonrev_proposal"
        start = time.perf_counter()
        cell = simulate_cell(
            config,
            model,
            model.perturbation(config, alpha),
            scheme,
            dt,
            config.steps_for(scheme),
            store,
        )
        elapsed = time.perf_counter() - start
        outcome.rows.extend(
            _cell_rows(cell, alpha=alpha, dt=dt, scheme=scheme, reference=reference, wall_seconds=elapsed)
        )
        outcome.n_cells += 1
        outcome.n_blown_cells += bool(cell.blown_up.all())
    return outcome


def analytic(config: ExperimentConfig) -> ExperimentOutcome:
    """Closed-form σ²_f(α) for the linear Gaussian model."""
    validate_for(config, "analytic")
    model = build_model(config)
    perturbation = model.perturbation(config, 0.0)
    if perturbation.kind is not PerturbationKind.LINEAR_J:
        raise ConfigError([("perturbation", "analytic curves need a constant matrix J")])
    params = model.observable.params
    curve = variance_curve(params["M"], params["l"], perturbation.J, config.alphas)
    outcome = ExperimentOutcome(ANALYTIC_COLUMNS)
    for alpha, sigma2 in zip(curve.alphas, curve.sigma2):
        outcome.rows.append(
            {
                "alpha": float(alpha),
                "sigma2": float(sigma2),
                "limit_inf": curve.limit_inf,
                "lower_bound": curve.lower_bound,
            }
        )
    if not curve.is_monotone():
        logger.warning("Analytic curve is not non-increasing in alpha")
    return outcome


def reference(config: ExperimentConfig) -> ExperimentOutcome:
    """π(f) and Z by quadrature for a two-dimensional target."""
    validate_for(config, "reference")
    model = build_model(config)
    if model.target.dim != 2:
        raise ConfigError([("target", "reference quadrature is two-dimensional only")])
    spec = _quadrature_spec(config)
    value = expectation_2d(model.target, model.observable, spec)
    z = normalization_2d(model.target, spec)
    outcome = ExperimentOutcome(REFERENCE_COLUMNS)
    outcome.rows.append(
        {
            "target": model.target.name,
            "observable": model.observable.name,
            "value": value.value,
            "error": value.error,
        }
    )
    outcome.rows.append(
        {"target": model.target.name, "observable": "normalization", "value": z.value, "error": z.error}
    )
    return outcome


COMMAND_RUNNERS: dict[str, Callable[[ExperimentConfig], ExperimentOutcome]] = {
    "sweep-alpha": sweep_alpha,
    "sweep-dt": sweep_dt,
    "analytic": analytic,
    "mh-study": mh_study,
    "reference": reference,
}


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def format_rows(columns: Sequence[str], rows: Iterable[dict]) -> list[list[str]]:
    return [[_cell(row.get(col)) for col in columns] for row in rows]


def write_csv(outcome: ExperimentOutcome, path: str | None = None) -> None:
    """Write header and rows; ``path=None`` writes to stdout."""
    table = format_rows(outcome.columns, outcome.rows)
    if path is None:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(outcome.columns)
        writer.writerows(table)
        return
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(outcome.columns)
        writer.writerows(table)
    logger.info("Wrote %d rows to %s", len(table), path)
