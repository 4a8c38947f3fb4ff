"""Time averages, asymptotic-variance estimators and mean-square errors.

Accumulators follow the observer interface of ``integrators.run_chain``:
they receive blocks of observable values of shape ``(n_steps, n_chains)``
together with an ``active`` mask and keep one set of statistics per chain.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .constants import DEFAULT_BURN_IN_FRACTION, MIN_BATCHES, NORMAL_QUANTILE_95
from .errors import DomainError

logger = logging.getLogger(__name__)


class RunningAverage:
    """Per-chain count, mean and sum of squared deviations (Welford/Chan)."""

    def __init__(self, n_chains: int = 1):
        self.count = np.zeros(n_chains, dtype=np.int64)
        self.mean = np.zeros(n_chains)
        self.m2 = np.zeros(n_chains)

    @property
    def n_chains(self) -> int:
        return self.count.shape[0]

    def update(self, value: float, chain: int = 0) -> None:
        """Add a single value to one chain."""
        self.count[chain] += 1
        delta = value - self.mean[chain]
        self.mean[chain] += delta / self.count[chain]
        self.m2[chain] += delta * (value - self.mean[chain])

    def observe(self, values: np.ndarray, active: np.ndarray | None = None) -> None:
        """Merge a block of values, shape ``(n_steps, n_chains)``."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] == 0:
            return
        if active is None:
            active = np.ones(values.shape, dtype=bool)
        # Sum each chain along a contiguous row so the result does not depend
        # on how many chains share the block
        active_t = np.ascontiguousarray(active.T)
        values_t = np.ascontiguousarray(values.T)
        n_b = active_t.sum(axis=1)
        masked = np.where(active_t, values_t, 0.0)
        mean_b = np.where(n_b > 0, masked.sum(axis=1) / np.maximum(n_b, 1), 0.0)
        m2_b = np.sum(np.where(active_t, values_t - mean_b[:, None], 0.0) ** 2, axis=1)
        self._combine(n_b, mean_b, m2_b)

    def merge(self, other: RunningAverage) -> RunningAverage:
        """Fold ``other`` (same number of chains) into this accumulator."""
        if other.n_chains != self.n_chains:
            raise DomainError(
                f"cannot merge {other.n_chains} chains into {self.n_chains}"
            )
        self._combine(other.count, other.mean, other.m2)
        return self

    def _combine(self, n_b, mean_b, m2_b) -> None:
        n_a = self.count
        total = n_a + n_b
        safe = np.maximum(total, 1)
        delta = mean_b - self.mean
        self.mean = np.where(total > 0, self.mean + delta * (n_b / safe), 0.0)
        self.m2 = self.m2 + m2_b + delta**2 * (n_a * n_b / safe)
        self.count = total

    def variance(self) -> np.ndarray:
        """Per-chain sample variance (NaN for fewer than two values)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 1, self.m2 / np.maximum(self.count - 1, 1), np.nan)


class BatchMeansState:
    """Batch averages of consecutive values, one list of batches per chain.

    A trailing partial batch is kept pending and never counted.
    """

    def __init__(self, batch_size: int, dt: float, n_chains: int = 1):
        if batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not dt > 0:
            raise DomainError("dt must be > 0")
        self.batch_size = int(batch_size)
        self.dt = float(dt)
        self._batches: list[list[np.ndarray]] = [[] for _ in range(n_chains)]
        self._pending: list[np.ndarray] = [np.empty(0) for _ in range(n_chains)]

    @classmethod
    def for_samples(cls, n_samples: int, dt: float, n_chains: int = 1) -> BatchMeansState:
        """K = ⌊√n⌋ batches of size ⌊n/K⌋."""
        if n_samples < 1:
            raise DomainError("n_samples must be >= 1")
        n_batches = max(1, math.isqrt(n_samples))
        return cls(n_samples // n_batches, dt, n_chains)

    @property
    def n_chains(self) -> int:
        return len(self._batches)

    def observe(self, values: np.ndarray, active: np.ndarray | None = None) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        for i in range(self.n_chains):
            column = values[:, i] if active is None else values[active[:, i], i]
            stream = np.concatenate([self._pending[i], column])
            n_full = stream.size // self.batch_size
            if n_full:
                full = stream[: n_full * self.batch_size].reshape(n_full, self.batch_size)
                self._batches[i].append(full.mean(axis=1))
            self._pending[i] = stream[n_full * self.batch_size :]

    def batch_means(self, chain: int = 0) -> np.ndarray:
        parts = self._batches[chain]
        return np.concatenate(parts) if parts else np.empty(0)

    def n_batches(self, chain: int = 0) -> int:
        return sum(part.size for part in self._batches[chain])


class VarianceMethod(str, Enum):
    ENSEMBLE = "ensemble"
    BATCH_MEANS = "batch_means"


@dataclass(frozen=True)
class VarianceReport:
    """Point estimate, asymptotic variance and 95% interval."""

    estimate: float
    asym_var: float
    ci_low: float
    ci_high: float
    method: VarianceMethod
    n_effective: int


def time_average(values: Iterable[float] | np.ndarray) -> float:
    """(1/n) Σ f(Xⁿ)."""
    if isinstance(values, np.ndarray):
        arr = values.astype(np.float64, copy=False).ravel()
        if arr.size == 0:
            raise DomainError("time average of an empty stream")
        return float(np.mean(arr))
    acc = RunningAverage(1)
    for v in values:
        acc.update(float(v))
    if acc.count[0] == 0:
        raise DomainError("time average of an empty stream")
    return float(acc.mean[0])


def _interval(estimate: float, half_width: float) -> tuple[float, float]:
    return estimate - half_width, estimate + half_width


def ensemble_asymptotic_variance(estimates: Sequence[float], T: float) -> VarianceReport:
    """σ̂² = T · (sample variance of per-chain time averages).

    Args:
        estimates: One π_T(f) per independent chain.
        T: Simulated time per chain (kept steps × Δt).
    """
    est = np.asarray(estimates, dtype=np.float64).ravel()
    if est.size < 2:
        raise DomainError(f"ensemble variance needs at least 2 chains, got {est.size}")
    if not T > 0:
        raise DomainError("T must be > 0")
    pooled = float(np.mean(est))
    sample_var = float(np.var(est, ddof=1))
    half = NORMAL_QUANTILE_95 * math.sqrt(sample_var / est.size)
    low, high = _interval(pooled, half)
    return VarianceReport(
        estimate=pooled,
        asym_var=T * sample_var,
        ci_low=low,
        ci_high=high,
        method=VarianceMethod.ENSEMBLE,
        n_effective=int(est.size),
    )


def batch_means_variance(
    state: BatchMeansState, full_mean: float | None = None, chain: int = 0
) -> VarianceReport:
    """σ̂² = bΔt · Σ_k (m_k − mean)² / (K − 1) from a single chain."""
    means = state.batch_means(chain)
    k = means.size
    if k < MIN_BATCHES:
        raise DomainError(f"batch means needs at least {MIN_BATCHES} batches, got {k}")
    centre = float(np.mean(means)) if full_mean is None else float(full_mean)
    batch_time = state.batch_size * state.dt
    asym_var = batch_time * float(np.sum((means - centre) ** 2)) / (k - 1)
    half = NORMAL_QUANTILE_95 * math.sqrt(asym_var / (k * batch_time))
    low, high = _interval(centre, half)
    return VarianceReport(
        estimate=centre,
        asym_var=asym_var,
        ci_low=low,
        ci_high=high,
        method=VarianceMethod.BATCH_MEANS,
        n_effective=k,
    )


@dataclass(frozen=True)
class MseReport:
    """``value`` is None when every run blew up."""

    value: float | None
    n_runs: int
    n_blowups: int

    @property
    def all_blown_up(self) -> bool:
        return self.value is None


def mse(
    estimates: Sequence[float],
    reference: float,
    *,
    blown_up: Sequence[bool] | None = None,
    relative: bool = False,
) -> MseReport:
    """Mean of squared deviations from ``reference`` over runs that finished.

    Runs flagged in ``blown_up`` (or with a non-finite estimate) are left
    out and counted. ``relative`` divides by reference².
    """
    if not math.isfinite(reference):
        raise DomainError("reference must be finite")
    if relative and reference == 0.0:
        raise DomainError("relative MSE needs a nonzero reference")
    est = np.asarray(estimates, dtype=np.float64).ravel()
    if est.size == 0:
        raise DomainError("mse needs at least one run")
    bad = ~np.isfinite(est)
    if blown_up is not None:
        bad |= np.asarray(blown_up, dtype=bool)
    n_bad = int(bad.sum())
    if n_bad == est.size:
        logger.warning("All %d runs blew up; MSE is missing", est.size)
        return MseReport(value=None, n_runs=int(est.size), n_blowups=n_bad)
    value = float(np.mean((est[~bad] - reference) ** 2))
    if relative:
        value /= reference**2
    return MseReport(value=value, n_runs=int(est.size), n_blowups=n_bad)


def burn_in_steps(n_steps: int, fraction: float = DEFAULT_BURN_IN_FRACTION) -> int:
    """Number of leading steps discarded before averaging."""
    if not 0.0 <= fraction < 1.0:
        raise DomainError("burn-in fraction must be in [0, 1)")
    return int(math.floor(fraction * n_steps))
