"""Step-level schemes for the nonreversible Langevin SDE.

Schemes work on batches of independent chains: positions have shape
``(n_chains, d)`` and each chain draws from its own ``RngStream``, so a
chain's trajectory is the same whichever batch or worker simulates it.

Conventions: drift b(x) = −β∇V(x) + αγ(x), noise √(2Δt)·ξ.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from .constants import BLOWUP_NORM, NOISE_BLOCK_STEPS, SCHEME_COSTS
from .errors import BlowupError, DomainError
from .perturbations import Drift, Perturbation, PerturbationKind
from .targets import Target
from .utils import rowdot

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


class RngStream:
    """Independent random stream for one chain, keyed by (seed, stream_id).

    Normals and uniforms come from two child generators of the same
    ``SeedSequence`` so buffering one never shifts the other.
    """

    def __init__(self, seed: int, stream_id: int):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        root = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        normal_seq, uniform_seq = root.spawn(2)
        self._normal = np.random.Generator(np.random.PCG64(normal_seq))
        self._uniform = np.random.Generator(np.random.PCG64(uniform_seq))

    def normal(self, shape) -> np.ndarray:
        return self._normal.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self._uniform.random(shape)


class RngBatch:
    """One ``RngStream`` per chain row."""

    def __init__(self, streams: Sequence[RngStream]):
        if not streams:
            raise DomainError("an RngBatch needs at least one stream")
        self.streams = list(streams)

    @classmethod
    def for_chains(cls, seed: int, chain_ids: Sequence[int]) -> RngBatch:
        return cls([RngStream(seed, cid) for cid in chain_ids])

    def __len__(self) -> int:
        return len(self.streams)

    def normal(self, n_steps: int, width: int) -> np.ndarray:
        """Standard normals of shape ``(n_steps, n_chains, width)``."""
        return np.stack([s.normal((n_steps, width)) for s in self.streams], axis=1)

    def uniform(self, n_steps: int, width: int = 1) -> np.ndarray:
        """Uniforms on [0, 1) of shape ``(n_steps, n_chains, width)``."""
        return np.stack([s.uniform((n_steps, width)) for s in self.streams], axis=1)


# ---------------------------------------------------------------------------
# State and budget
# ---------------------------------------------------------------------------


@dataclass
class StepBudget:
    """Counts ∇V evaluations (one per call on the whole batch)."""

    gradient_evals: int = 0

    def charge(self, n: int = 1) -> None:
        self.gradient_evals += n


@dataclass(frozen=True)
class ChainState:
    """Current points with cached ∇V and (when needed) V."""

    x: np.ndarray
    grad: np.ndarray
    potential: np.ndarray | None = None

    def check_cache(self, target: Target, tol: float = 1e-12) -> float:
        """Max relative mismatch between the caches and recomputation."""
        grad = target.gradient(self.x)
        err = float(np.max(np.abs(grad - self.grad)) / max(1.0, np.max(np.abs(grad))))
        if self.potential is not None:
            pot = target.potential(self.x)
            err = max(
                err,
                float(np.max(np.abs(pot - self.potential)) / max(1.0, np.max(np.abs(pot)))),
            )
        if err > tol:
            raise AssertionError(f"stale chain cache (mismatch {err:.3e})")
        return err


def _needs_potential(scheme: str, perturbation: Perturbation) -> bool:
    return scheme != "em" or perturbation.kind is PerturbationKind.PSI_TRUNCATED


def initial_state(
    target: Target,
    x0: np.ndarray,
    n_chains: int | None = None,
    need_potential: bool = True,
) -> ChainState:
    """Chain state at ``x0`` (shape ``(d,)`` broadcast, or ``(n_chains, d)``)."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = np.tile(x0, (n_chains or 1, 1))
    if x0.shape[-1] != target.dim:
        raise DomainError(f"initial point has dimension {x0.shape[-1]}, target {target.dim}")
    x0 = target.domain.wrap(x0)
    return ChainState(
        x=x0,
        grad=target.gradient(x0),
        potential=target.potential(x0) if need_potential else None,
    )


def _blown_up(x: np.ndarray) -> np.ndarray:
    finite = np.all(np.isfinite(x), axis=-1)
    with np.errstate(over="ignore", invalid="ignore"):
        large = np.sqrt(rowdot(np.where(np.isfinite(x), x, 0.0), np.where(np.isfinite(x), x, 0.0))) > BLOWUP_NORM
    return ~finite | large


def _evaluate(
    target: Target, x: np.ndarray, need_potential: bool
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """∇V (and V) on a batch; rows that raise ``DomainError`` are flagged.

    Flagged rows get V = +inf and a zero gradient.
    """
    try:
        grad = target.gradient(x)
        potential = target.potential(x) if need_potential else None
        return grad, potential, np.zeros(x.shape[0], dtype=bool)
    except DomainError:
        pass
    grad = np.zeros_like(x)
    potential = np.full(x.shape[0], np.inf) if need_potential else None
    bad = np.zeros(x.shape[0], dtype=bool)
    for i in range(x.shape[0]):
        try:
            grad[i] = target.gradient(x[i : i + 1])[0]
            if need_potential:
                potential[i] = target.potential(x[i : i + 1])[0]
        except DomainError as exc:
            logger.warning("Chain row %d left the model domain: %s", i, exc)
            bad[i] = True
    return grad, potential, bad


# ---------------------------------------------------------------------------
# Batch kernels (no exceptions on blowup; they return masks)
# ---------------------------------------------------------------------------


def _em_advance(
    state: ChainState,
    drift: Drift,
    dt: float,
    xi: np.ndarray,
    budget: StepBudget,
    need_potential: bool,
) -> tuple[ChainState, np.ndarray]:
    target = drift.target
    b = drift.evaluate(state.x, state.grad, state.potential)
    with np.errstate(over="ignore", invalid="ignore"):
        x_new = state.x + dt * b + math.sqrt(2.0 * dt) * xi
    bad = _blown_up(x_new)
    x_new = np.where(bad[:, None], state.x, target.domain.wrap(x_new))
    grad, potential, domain_bad = _evaluate(target, x_new, need_potential)
    budget.charge()
    bad |= domain_bad
    if domain_bad.any():
        x_new = np.where(domain_bad[:, None], state.x, x_new)
        grad = np.where(domain_bad[:, None], state.grad, grad)
        if potential is not None:
            potential = np.where(domain_bad, state.potential, potential)
    return ChainState(x_new, grad, potential), bad


def _log_proposal(target: Target, x_from, x_to, b_from, dt: float) -> np.ndarray:
    """log q(x_to | x_from) up to a constant, nearest image on the torus."""
    mean_shift = target.domain.displacement(x_from, x_to) - dt * b_from
    return -rowdot(mean_shift, mean_shift) / (4.0 * dt)


def _mala_advance(
    state: ChainState,
    drift: Drift,
    dt: float,
    xi: np.ndarray,
    u: np.ndarray,
    budget: StepBudget,
    include_perturbation: bool,
) -> tuple[ChainState, np.ndarray]:
    target = drift.target
    b_x = drift.evaluate(state.x, state.grad, state.potential, include_perturbation)
    with np.errstate(over="ignore", invalid="ignore"):
        y = state.x + dt * b_x + math.sqrt(2.0 * dt) * xi
    invalid = _blown_up(y)
    y = target.domain.wrap(np.where(invalid[:, None], state.x, y))
    grad_y, pot_y, domain_bad = _evaluate(target, y, need_potential=True)
    budget.charge()
    invalid |= domain_bad
    b_y = drift.evaluate(y, grad_y, pot_y, include_perturbation)
    with np.errstate(over="ignore", invalid="ignore"):
        log_r = (
            -target.beta * (pot_y - state.potential)
            + _log_proposal(target, y, state.x, b_y, dt)
            - _log_proposal(target, state.x, y, b_x, dt)
        )
        log_u = np.log(u)
    accepted = (log_u < log_r) & ~invalid & ~np.isnan(log_r)
    new_state = ChainState(
        x=np.where(accepted[:, None], y, state.x),
        grad=np.where(accepted[:, None], grad_y, state.grad),
        potential=np.where(accepted, pot_y, state.potential),
    )
    return new_state, accepted


def _flow_advance(
    state: ChainState,
    target: Target,
    perturbation: Perturbation,
    dt: float,
    budget: StepBudget,
    need_potential: bool,
) -> tuple[ChainState, np.ndarray]:
    """Classical RK4 for ż = αγ(z); the cached ∇V serves the first stage."""
    alpha, beta = perturbation.alpha, target.beta
    needs_v = perturbation.kind is PerturbationKind.PSI_TRUNCATED

    def velocity(z, grad, pot):
        return alpha * perturbation.gamma(z, grad, pot, beta)

    def stage(z):
        grad, pot, bad = _evaluate(target, z, needs_v)
        budget.charge()
        return velocity(z, grad, pot), bad

    x = state.x
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = velocity(x, state.grad, state.potential)
        k2, bad2 = stage(x + 0.5 * dt * k1)
        k3, bad3 = stage(x + 0.5 * dt * k2)
        k4, bad4 = stage(x + dt * k3)
        x_new = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    bad = _blown_up(x_new) | bad2 | bad3 | bad4
    x_new = np.where(bad[:, None], x, target.domain.wrap(np.where(bad[:, None], x, x_new)))
    grad, potential, domain_bad = _evaluate(target, x_new, need_potential)
    budget.charge()
    bad |= domain_bad
    if bad.any():
        x_new = np.where(bad[:, None], x, x_new)
        grad = np.where(bad[:, None], state.grad, grad)
        if potential is not None:
            potential = np.where(bad, state.potential, potential)
    return ChainState(x_new, grad, potential), bad


def _strang_advance(
    state: ChainState,
    drift: Drift,
    dt: float,
    xi: np.ndarray,
    u: np.ndarray,
    budget: StepBudget,
) -> tuple[ChainState, np.ndarray, np.ndarray]:
    """Half MALA step, full nonreversible flow, half MALA step.

    ``xi`` has width 2d and ``u`` width 2: one slice per half step.
    """
    d = state.x.shape[-1]
    half = 0.5 * dt
    state, acc1 = _mala_advance(state, drift, half, xi[:, :d], u[:, 0], budget, False)
    state, bad = _flow_advance(state, drift.target, drift.perturbation, dt, budget, True)
    state, acc2 = _mala_advance(state, drift, half, xi[:, d:], u[:, 1], budget, False)
    return state, bad, acc1.astype(np.int64) + acc2.astype(np.int64)


# ---------------------------------------------------------------------------
# Single-step public API
# ---------------------------------------------------------------------------


def _noise(rng: RngBatch | None, noise, shape) -> np.ndarray:
    if noise is not None:
        return np.broadcast_to(np.asarray(noise, dtype=np.float64), shape)
    if rng is None:
        raise DomainError("either rng or explicit noise must be given")
    return rng.normal(1, shape[-1])[0]


def em_step(
    state: ChainState,
    drift: Drift,
    dt: float,
    rng: RngBatch | None = None,
    *,
    noise: np.ndarray | None = None,
    budget: StepBudget | None = None,
    step_index: int = 0,
) -> ChainState:
    """x' = x + Δt·b(x) + √(2Δt)·ξ; raises ``BlowupError`` on divergence."""
    if not dt > 0:
        raise DomainError("dt must be > 0")
    xi = _noise(rng, noise, state.x.shape)
    need_v = state.potential is not None
    new_state, bad = _em_advance(state, drift, dt, xi, budget or StepBudget(), need_v)
    if bad.any():
        raise BlowupError(step_index)
    return new_state


def mala_step(
    state: ChainState,
    target: Target,
    dt: float,
    perturbation: Perturbation | None = None,
    *,
    rng: RngBatch | None = None,
    noise: np.ndarray | None = None,
    uniform: np.ndarray | None = None,
    budget: StepBudget | None = None,
) -> tuple[ChainState, np.ndarray]:
    """One Metropolis-adjusted step; the proposal drift includes
    ``perturbation`` when it is given and nontrivial.

    Returns the new state and the per-chain acceptance flags.
    """
    if not dt > 0:
        raise DomainError("dt must be > 0")
    if state.potential is None:
        state = replace(state, potential=target.potential(state.x))
    xi = _noise(rng, noise, state.x.shape)
    if uniform is None:
        if rng is None:
            raise DomainError("either rng or explicit uniforms must be given")
        uniform = rng.uniform(1)[0, :, 0]
    u = np.broadcast_to(np.asarray(uniform, dtype=np.float64), state.x.shape[:1])
    include = perturbation is not None and not perturbation.is_trivial
    drift = Drift(target, perturbation if include else _NONE)
    return _mala_advance(state, drift, dt, xi, u, budget or StepBudget(), include)


def rk4_flow_step(
    x: np.ndarray, gamma: Callable[[np.ndarray], np.ndarray], dt: float
) -> np.ndarray:
    """One classical fourth-order Runge–Kutta step of ż = γ(z)."""
    if not dt > 0:
        raise DomainError("dt must be > 0")
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = gamma(x)
        k2 = gamma(x + 0.5 * dt * k1)
        k3 = gamma(x + 0.5 * dt * k2)
        k4 = gamma(x + dt * k3)
        out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if np.any(_blown_up(np.atleast_2d(out))):
        raise BlowupError(0, "flow step blew up")
    return out


def strang_step(
    state: ChainState,
    target: Target,
    perturbation: Perturbation,
    dt: float,
    rng: RngBatch | None = None,
    *,
    noise: np.ndarray | None = None,
    uniform: np.ndarray | None = None,
    budget: StepBudget | None = None,
    step_index: int = 0,
) -> ChainState:
    """Φ_{r,Δt/2} ∘ Φ_{n,Δt} ∘ Φ_{r,Δt/2} with MALA half steps and RK4 flow."""
    if not dt > 0:
        raise DomainError("dt must be > 0")
    if state.potential is None:
        state = replace(state, potential=target.potential(state.x))
    n, d = state.x.shape
    xi = _noise(rng, noise, (n, 2 * d))
    if uniform is None:
        if rng is None:
            raise DomainError("either rng or explicit uniforms must be given")
        uniform = rng.uniform(1, 2)[0]
    u = np.broadcast_to(np.asarray(uniform, dtype=np.float64), (n, 2))
    new_state, bad, _ = _strang_advance(
        state, Drift(target, perturbation), dt, xi, u, budget or StepBudget()
    )
    if bad.any():
        raise BlowupError(step_index)
    return new_state


_NONE = Perturbation(PerturbationKind.NONE)


# ---------------------------------------------------------------------------
# Chains
# ---------------------------------------------------------------------------


class ChainObserver(Protocol):
    """Receives blocks of observable values, shape ``(n_steps, n_chains)``.

    ``active`` marks the entries recorded before a chain blew up.
    """

    def observe(self, values: np.ndarray, active: np.ndarray) -> None: ...


@dataclass
class ChainResult:
    """Bookkeeping of a batch of chains after ``run_chain``."""

    scheme: str
    dt: float
    n_steps: int
    blowup_step: np.ndarray
    gradient_evals: int
    accepted: np.ndarray | None = None
    attempts: int = 0
    final_state: ChainState | None = field(default=None, repr=False)

    @property
    def n_chains(self) -> int:
        return self.blowup_step.shape[0]

    @property
    def blown_up(self) -> np.ndarray:
        return self.blowup_step >= 0

    @property
    def partial(self) -> bool:
        return bool(self.blown_up.any())

    @property
    def acceptance_rate(self) -> np.ndarray | None:
        """Per-chain acceptance rate (MALA family and splitting)."""
        if self.accepted is None or self.attempts == 0:
            return None
        return self.accepted / self.attempts


def run_chain(
    initial: np.ndarray,
    scheme: str,
    target: Target,
    perturbation: Perturbation,
    dt: float,
    n_steps: int,
    rng: RngBatch,
    observers: Sequence[ChainObserver] = (),
    observable: Callable[[np.ndarray], np.ndarray] | None = None,
    burn_in: int = 0,
) -> ChainResult:
    """Advance ``len(rng)`` chains for ``n_steps`` and stream f(Xⁿ) to observers.

    Values from the first ``burn_in`` steps are not observed.  A chain that
    blows up is frozen and its later values are masked out; the result
    records the step index.
    """
    if scheme not in SCHEME_COSTS:
        raise DomainError(f"unknown scheme {scheme!r}; choose from {sorted(SCHEME_COSTS)}")
    if not dt > 0:
        raise DomainError("dt must be > 0")
    if n_steps < 0:
        raise DomainError("n_steps must be >= 0")
    if observers and observable is None:
        raise DomainError("observers need an observable")

    n_chains = len(rng)
    need_v = _needs_potential(scheme, perturbation)
    state = initial_state(target, initial, n_chains, need_v)
    if state.x.shape[0] != n_chains:
        raise DomainError(f"{state.x.shape[0]} initial points for {n_chains} streams")
    d = target.dim
    drift = Drift(target, perturbation)
    budget = StepBudget()
    alive = np.ones(n_chains, dtype=bool)
    blowup_step = np.full(n_chains, -1, dtype=np.int64)
    track_acceptance = scheme != "em"
    accepted = np.zeros(n_chains, dtype=np.int64) if track_acceptance else None
    attempts = 0
    include_nonrev = scheme == "mala_nonrev_proposal"
    noise_width = 2 * d if scheme == "strang" else d
    uniform_width = 2 if scheme == "strang" else 1

    step = 0
    while step < n_steps:
        block = min(NOISE_BLOCK_STEPS, n_steps - step)
        xi_block = rng.normal(block, noise_width)
        u_block = rng.uniform(block, uniform_width) if track_acceptance else None
        values = np.zeros((block, n_chains)) if observers else None
        active = np.zeros((block, n_chains), dtype=bool) if observers else None

        for k in range(block):
            xi = xi_block[k]
            if scheme == "em":
                state, bad = _em_advance(state, drift, dt, xi, budget, need_v)
            elif scheme == "strang":
                state, bad, n_acc = _strang_advance(state, drift, dt, xi, u_block[k], budget)
                accepted += np.where(alive, n_acc, 0)
                attempts += 2
            else:
                state, acc = _mala_advance(
                    state, drift, dt, xi, u_block[k, :, 0], budget, include_nonrev
                )
                bad = np.zeros(n_chains, dtype=bool)
                accepted += acc & alive
                attempts += 1

            newly = bad & alive
            if newly.any():
                for i in np.flatnonzero(newly):
                    logger.warning(
                        "Chain %d (%s, dt=%g, alpha=%g) blew up at step %d",
                        rng.streams[i].stream_id,
                        scheme,
                        dt,
                        perturbation.alpha,
                        step + k,
                    )
                blowup_step[newly] = step + k
                alive &= ~newly

            if observers and step + k >= burn_in:
                values[k] = observable(state.x)
                active[k] = alive

        if observers:
            keep = slice(max(0, burn_in - step), block)
            for observer in observers:
                observer.observe(values[keep], active[keep])
        step += block

    return ChainResult(
        scheme=scheme,
        dt=dt,
        n_steps=n_steps,
        blowup_step=blowup_step,
        gradient_evals=budget.gradient_evals,
        accepted=accepted,
        attempts=attempts,
        final_state=state,
    )
