"""Experiment configuration files (YAML or JSON) and their validation."""

from __future__ import annotations

import logging
import math
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from types import MappingProxyType

import yaml

from .constants import (
    CONFIG_SCHEMA_VERSION,
    DEFAULT_BURN_IN_FRACTION,
    DEFAULT_N_CHAINS,
    QUADRATURE_DEFAULT_GRID,
    QUADRATURE_DEFAULT_N_STD,
    QUADRATURE_DEFAULT_TOL,
    SCHEME_COSTS,
)
from .errors import ConfigError
from .utils import default_threads

logger = logging.getLogger(__name__)

COMMANDS = ("sweep-alpha", "sweep-dt", "analytic", "mh-study", "reference")

_KNOWN_KEYS = {
    "version",
    "target",
    "observable",
    "perturbation",
    "scheme",
    "schemes",
    "alphas",
    "dts",
    "dt",
    "n_steps",
    "gradient_budget",
    "n_chains",
    "seed",
    "burn_in_fraction",
    "output",
    "include_mala_baseline",
    "reference",
    "quadrature",
    "batch_means",
    "threads",
    "initial",
}


@dataclass(frozen=True)
class NamedSpec:
    """``{name: ..., params: {...}}`` section of a config file."""

    name: str
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))


@dataclass(frozen=True)
class QuadratureSettings:
    grid_per_axis: int = QUADRATURE_DEFAULT_GRID
    n_std: float = QUADRATURE_DEFAULT_N_STD
    tol: float = QUADRATURE_DEFAULT_TOL


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description.

    At most one of ``n_steps`` and ``gradient_budget`` is set; the
    simulation commands require one of them.
    """

    target: NamedSpec
    observable: NamedSpec
    perturbation: NamedSpec = NamedSpec("none")
    schemes: tuple[str, ...] = ("em",)
    alphas: tuple[float, ...] = (0.0,)
    dts: tuple[float, ...] = ()
    dt: float | None = None
    n_steps: int | None = None
    gradient_budget: int | None = None
    n_chains: int = DEFAULT_N_CHAINS
    seed: int = 0
    burn_in_fraction: float = DEFAULT_BURN_IN_FRACTION
    output: str | None = None
    include_mala_baseline: bool = False
    reference: float | None = None
    quadrature: QuadratureSettings = QuadratureSettings()
    batch_means: bool = False
    threads: int = field(default_factory=default_threads)
    initial: tuple[float, ...] | None = None
    source: str | None = None

    @property
    def scheme(self) -> str:
        return self.schemes[0]

    def steps_for(self, scheme: str) -> int:
        """Steps per run: ``n_steps`` or the gradient budget over the scheme cost."""
        if self.n_steps is not None:
            return self.n_steps
        return self.gradient_budget // SCHEME_COSTS[scheme]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _named(raw, key: str, problems: list[tuple[str, str]], required: bool = True) -> NamedSpec | None:
    if raw is None:
        if required:
            problems.append((key, "is required"))
        return None
    if isinstance(raw, str):
        return NamedSpec(raw)
    if not isinstance(raw, Mapping) or not isinstance(raw.get("name"), str):
        problems.append((key, "must be a name or a mapping with 'name' and 'params'"))
        return None
    params = raw.get("params") or {}
    if not isinstance(params, Mapping):
        problems.append((f"{key}.params", "must be a mapping"))
        params = {}
    extra = set(raw) - {"name", "params"}
    if extra:
        problems.append((key, f"unknown keys {sorted(extra)}"))
    return NamedSpec(raw["name"], params)


def _coerce_number(raw):
    """PyYAML reads exponent floats without a dot (``1e-3``) as strings."""
    if isinstance(raw, str):
        try:
            return float(raw)
        except ValueError:
            return raw
    return raw


def _float_list(raw, key: str, problems, *, positive: bool) -> tuple[float, ...] | None:
    if raw is None:
        return None
    if not isinstance(raw, list) or not raw:
        problems.append((key, "must be a non-empty list of numbers"))
        return None
    values = []
    for i, item in enumerate(raw):
        item = _coerce_number(item)
        if isinstance(item, bool) or not isinstance(item, (int, float)) or not math.isfinite(item):
            problems.append((f"{key}[{i}]", f"{item!r} is not a finite number"))
            continue
        if positive and item <= 0:
            problems.append((f"{key}[{i}]", "must be > 0"))
        elif not positive and item < 0:
            problems.append((f"{key}[{i}]", "must be >= 0"))
        if float(item) in values:
            problems.append((f"{key}[{i}]", f"{item!r} appears more than once"))
            continue
        values.append(float(item))
    return tuple(values)


def _int(raw, key: str, problems, *, minimum: int) -> int | None:
    if raw is None:
        return None
    if isinstance(raw, bool) or not isinstance(raw, int):
        problems.append((key, f"{raw!r} is not an integer"))
        return None
    if raw < minimum:
        problems.append((key, f"must be >= {minimum}"))
        return None
    return raw


def config_from_mapping(data, source: str | None = None) -> ExperimentConfig:
    """Validate a parsed config mapping, collecting every problem."""
    problems: list[tuple[str, str]] = []
    if not isinstance(data, Mapping):
        raise ConfigError([("<root>", "config must be a mapping")])

    unknown = set(data) - _KNOWN_KEYS
    if unknown:
        problems.append(("<root>", f"unknown keys {sorted(unknown)}"))
    version = data.get("version")
    if version != CONFIG_SCHEMA_VERSION:
        problems.append(("version", f"must be {CONFIG_SCHEMA_VERSION}, got {version!r}"))

    target = _named(data.get("target"), "target", problems)
    observable = _named(data.get("observable"), "observable", problems)
    perturbation = _named(data.get("perturbation"), "perturbation", problems, required=False)

    if "schemes" in data and "scheme" in data:
        problems.append(("scheme", "give either 'scheme' or 'schemes', not both"))
    raw_schemes = data.get("schemes", [data["scheme"]] if "scheme" in data else ["em"])
    if not isinstance(raw_schemes, list) or not raw_schemes:
        problems.append(("schemes", "must be a non-empty list"))
        raw_schemes = []
    for s in raw_schemes:
        if s not in SCHEME_COSTS:
            problems.append(("schemes", f"unknown scheme {s!r}; choose from {sorted(SCHEME_COSTS)}"))

    alphas = _float_list(data.get("alphas"), "alphas", problems, positive=False)
    dts = _float_list(data.get("dts"), "dts", problems, positive=True)
    dt = _coerce_number(data.get("dt"))
    if dt is not None and (isinstance(dt, bool) or not isinstance(dt, (int, float)) or not dt > 0):
        problems.append(("dt", "must be a number > 0"))

    n_steps = _int(data.get("n_steps"), "n_steps", problems, minimum=1)
    budget = _int(data.get("gradient_budget"), "gradient_budget", problems, minimum=1)
    if "n_steps" in data and "gradient_budget" in data:
        problems.append(("n_steps", "give either 'n_steps' or 'gradient_budget', not both"))
    if budget is not None:
        for s in raw_schemes:
            cost = SCHEME_COSTS.get(s)
            if cost and budget % cost:
                problems.append(
                    ("gradient_budget", f"{budget} is not a multiple of the {s!r} step cost {cost}")
                )
        if data.get("include_mala_baseline") and budget % SCHEME_COSTS["mala"]:
            problems.append(("gradient_budget", "not a multiple of the MALA step cost"))

    n_chains = _int(data.get("n_chains", DEFAULT_N_CHAINS), "n_chains", problems, minimum=1)
    seed = _int(data.get("seed", 0), "seed", problems, minimum=0)
    threads = _int(data.get("threads"), "threads", problems, minimum=1)

    burn_in = _coerce_number(data.get("burn_in_fraction", DEFAULT_BURN_IN_FRACTION))
    if isinstance(burn_in, bool) or not isinstance(burn_in, (int, float)) or not 0 <= burn_in < 1:
        problems.append(("burn_in_fraction", "must be in [0, 1)"))

    output = data.get("output")
    if output is not None and not isinstance(output, str):
        problems.append(("output", "must be a path string"))

    reference = _coerce_number(data.get("reference"))
    if reference is not None and (
        isinstance(reference, bool)
        or not isinstance(reference, (int, float))
        or not math.isfinite(reference)
    ):
        problems.append(("reference", "must be a finite number"))

    for flag in ("include_mala_baseline", "batch_means"):
        if flag in data and not isinstance(data[flag], bool):
            problems.append((flag, "must be true or false"))

    quad_raw = data.get("quadrature") or {}
    quadrature = QuadratureSettings()
    if not isinstance(quad_raw, Mapping):
        problems.append(("quadrature", "must be a mapping"))
    else:
        extra = set(quad_raw) - {"grid_per_axis", "n_std", "tol"}
        if extra:
            problems.append(("quadrature", f"unknown keys {sorted(extra)}"))
        grid = _int(
            quad_raw.get("grid_per_axis", QUADRATURE_DEFAULT_GRID),
            "quadrature.grid_per_axis",
            problems,
            minimum=2,
        )
        n_std = _coerce_number(quad_raw.get("n_std", QUADRATURE_DEFAULT_N_STD))
        tol = _coerce_number(quad_raw.get("tol", QUADRATURE_DEFAULT_TOL))
        for key, value in (("n_std", n_std), ("tol", tol)):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                problems.append((f"quadrature.{key}", "must be a number > 0"))
        if not any(k.startswith("quadrature") for k, _ in problems):
            quadrature = QuadratureSettings(grid, float(n_std), float(tol))

    initial = None
    if data.get("initial") is not None:
        raw_initial = data["initial"]
        if not isinstance(raw_initial, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw_initial
        ):
            problems.append(("initial", "must be a list of numbers"))
        else:
            initial = tuple(float(v) for v in raw_initial)

    if problems:
        raise ConfigError(problems)

    kwargs = {}
    if threads is not None:
        kwargs["threads"] = threads
    return ExperimentConfig(
        target=target,
        observable=observable,
        perturbation=perturbation or NamedSpec("none"),
        schemes=tuple(raw_schemes),
        alphas=alphas if alphas is not None else (0.0,),
        dts=dts or (),
        dt=float(dt) if dt is not None else None,
        n_steps=n_steps,
        gradient_budget=budget,
        n_chains=n_chains,
        seed=seed,
        burn_in_fraction=float(burn_in),
        output=output,
        include_mala_baseline=bool(data.get("include_mala_baseline", False)),
        reference=float(reference) if reference is not None else None,
        quadrature=quadrature,
        batch_means=bool(data.get("batch_means", False)),
        initial=initial,
        source=source,
        **kwargs,
    )


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read and validate a YAML or JSON experiment file."""
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError([("<file>", f"{path} does not exist")]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([("<file>", f"cannot parse {path}: {exc}")]) from exc
    config = config_from_mapping(data, source=path)
    logger.info("Loaded config %s (target %s)", path, config.target.name)
    return config


def validate_for(config: ExperimentConfig, command: str) -> None:
    """Check the fields a subcommand needs; raises ``ConfigError``."""
    problems: list[tuple[str, str]] = []
    if command not in COMMANDS:
        problems.append(("<command>", f"unknown command {command!r}"))
    if command in ("sweep-alpha", "sweep-dt", "mh-study"):
        if config.n_steps is None and config.gradient_budget is None:
            problems.append(("n_steps", "one of 'n_steps' and 'gradient_budget' is required"))
    if command in ("sweep-alpha", "mh-study"):
        if config.dt is None and len(config.dts) != 1:
            problems.append(("dt", f"{command} needs 'dt' (or a single-entry 'dts')"))
    if command == "sweep-dt":
        if config.gradient_budget is None:
            problems.append(("gradient_budget", "sweep-dt runs at a fixed gradient budget"))
    if command == "analytic":
        if config.target.name != "standard_gaussian":
            problems.append(("target", "analytic curves need the standard_gaussian target"))
        if config.observable.name != "quadratic":
            problems.append(("observable", "analytic curves need the quadratic observable"))
    if problems:
        raise ConfigError(problems)
