"""Experiment configuration for sortflow.

One TOML file describes a whole experiment: the layout, operation times,
demand, solver settings and the simulation battery.  Environment variables
prefixed ``SORTFLOW_`` override file values, with ``__`` separating nested
keys (``SORTFLOW_SOLVER__MAX_ITER=50``).  All configuration is centralised
here; no other module reads os.environ directly.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Any

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from sortflow.delay.cost import TimingParams
from sortflow.network.layout import Demand, parse_demand
from sortflow.solver.frank_wolfe import SolverConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

#: Policies the simulator knows by name.
POLICY_NAMES: frozenset[str] = frozenset({"flow", "random", "zoning"})

_LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}


class ConfigError(ValueError):
    """Raised when an experiment configuration is missing or invalid."""


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------


class LayoutSection(BaseModel):
    """Where the grid comes from: a layout file, or the standard generator.

    Attributes:
        path: Layout text file; when unset the generator settings apply.
        rows: Generated grid height.
        cols: Generated grid width.
        workstations: Number of generated workstations.
        dropoffs: Number of generated drop-off points.
        seed: Seed for drop-off placement.
    """

    path: Path | None = None
    rows: int = Field(default=19, ge=3)
    cols: int = Field(default=20, ge=3)
    workstations: int = Field(default=2, ge=1)
    dropoffs: int = Field(default=30, ge=1)
    seed: int = 0

    @field_validator("path")
    @classmethod
    def path_exists(cls, v: Path | None) -> Path | None:
        if v is not None and not v.is_file():
            raise ValueError(f"layout file {v} does not exist")
        return v


class TimingSection(BaseModel):
    """Operation times in time-step units (defaults 1, 4, 3, 1)."""

    t1: float = Field(default=1.0, gt=0)
    t2: float = Field(default=4.0, gt=0)
    t_load: float = Field(default=3.0, gt=0)
    t_drop: float = Field(default=1.0, gt=0)
    t_load_sq: float | None = None
    t_drop_sq: float | None = None

    @model_validator(mode="after")
    def check_moments(self) -> TimingSection:
        if self.t_load_sq is not None and self.t_load_sq < self.t_load**2:
            raise ValueError("t_load_sq must be >= t_load ** 2")
        if self.t_drop_sq is not None and self.t_drop_sq < self.t_drop**2:
            raise ValueError("t_drop_sq must be >= t_drop ** 2")
        for name in ("t2", "t_load", "t_drop"):
            ratio = getattr(self, name) / self.t1
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"{name} must be a whole multiple of t1 for simulation")
        return self

    def to_params(self) -> TimingParams:
        return TimingParams(
            t1=self.t1,
            t2=self.t2,
            t_load=self.t_load,
            t_drop=self.t_drop,
            t_load_sq=self.t_load_sq,
            t_drop_sq=self.t_drop_sq,
        )


class DemandSection(BaseModel):
    """Parcel demand: a per-drop-off CSV, or total λ spread uniformly."""

    lam: float = Field(default=0.1, ge=0)
    path: Path | None = None

    @field_validator("path")
    @classmethod
    def path_exists(cls, v: Path | None) -> Path | None:
        if v is not None and not v.is_file():
            raise ValueError(f"demand file {v} does not exist")
        return v

    def build(self, dropoff_ids: list[int], lam: float | None = None) -> Demand:
        """Return the demand over *dropoff_ids*.

        Args:
            dropoff_ids: Drop-offs of the layout in use.
            lam: Overrides the configured λ for uniform demand.

        Returns:
            The parsed CSV demand when a file is configured and *lam* is
            unset, else uniform demand.
        """
        if self.path is not None and lam is None:
            return parse_demand(self.path.read_text(encoding="utf-8"))
        return Demand.uniform(dropoff_ids, self.lam if lam is None else lam)


class SolverSection(BaseModel):
    """Frank-Wolfe settings."""

    epsilon: float = Field(default=1e-6, gt=0)
    max_iter: int = Field(default=200, ge=1)
    line_search_iter: int = Field(default=64, ge=1)
    seed: int = 0

    def to_config(self) -> SolverConfig:
        return SolverConfig(
            epsilon=self.epsilon,
            max_iter=self.max_iter,
            line_search_iter=self.line_search_iter,
            seed=self.seed,
        )


class SimulationSection(BaseModel):
    """The trial battery: policies x fleet sizes x trials, plus the λ sweep.

    Attributes:
        policies: Policy names to run.
        robots: Fleet sizes R.
        lambdas: λ values for which the flow-guided policy is solved and run.
        ticks: Trial length.
        warmup_fraction: Leading share of ticks excluded from counts.
        trials: Trials per (policy, R).
        seed_base: Trial *k* runs with seed ``seed_base + k``.
        check_invariants: Assert floor safety every tick.
        workers: Worker processes; ``None`` lets the pool decide.
    """

    policies: list[str] = Field(default_factory=lambda: ["flow", "random", "zoning"])
    robots: list[int] = Field(default_factory=lambda: [10, 15, 20, 25, 30, 35])
    lambdas: list[float] = Field(default_factory=lambda: [0.01, 0.04, 0.07, 0.1, 0.2, 0.3])
    ticks: int = Field(default=3000, ge=1)
    warmup_fraction: float = Field(default=0.1, ge=0, lt=1)
    trials: int = Field(default=10, ge=1)
    seed_base: int = Field(default=0, ge=0)
    check_invariants: bool = False
    workers: int | None = Field(default=None, ge=1)

    @field_validator("policies")
    @classmethod
    def known_policies(cls, v: list[str]) -> list[str]:
        if not v:
            raise ValueError("policies must not be empty")
        unknown = sorted(set(v) - POLICY_NAMES)
        if unknown:
            raise ValueError(f"unknown policies {unknown}; expected some of {sorted(POLICY_NAMES)}")
        return v

    @field_validator("robots")
    @classmethod
    def robots_nonempty(cls, v: list[int]) -> list[int]:
        if not v or min(v) < 0:
            raise ValueError("robots must be a non-empty list of counts >= 0")
        return v

    @field_validator("lambdas")
    @classmethod
    def lambdas_nonempty(cls, v: list[float]) -> list[float]:
        if not v or min(v) < 0:
            raise ValueError("lambdas must be a non-empty list of values >= 0")
        return v

    @property
    def trial_seeds(self) -> list[int]:
        return [self.seed_base + k for k in range(self.trials)]


# ---------------------------------------------------------------------------
# Top level
# ---------------------------------------------------------------------------


class ExperimentConfig(BaseSettings):
    """Experiment configuration resolved from a TOML file and the environment.

    Attributes:
        layout: Grid source.
        timing: Operation times.
        demand: Parcel demand.
        solver: Frank-Wolfe settings.
        simulation: Trial battery.
        output_dir: Directory that receives every artifact.
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL).
    """

    layout: LayoutSection = Field(default_factory=LayoutSection)
    timing: TimingSection = Field(default_factory=TimingSection)
    demand: DemandSection = Field(default_factory=DemandSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    simulation: SimulationSection = Field(default_factory=SimulationSection)
    output_dir: Path = Path("out")
    log_level: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="SORTFLOW_",
        env_nested_delimiter="__",
        case_sensitive=False,
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # Environment first: it overrides values read from the TOML file.
        return env_settings, dotenv_settings, init_settings, file_secret_settings

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate that log_level is one of the accepted Python logging levels.

        Args:
            v: The raw log level string.

        Returns:
            The uppercased log level string if valid.

        Raises:
            ValueError: If the value is not a recognised logging level.
        """
        upper = v.upper()
        if upper not in _LOG_LEVELS:
            raise ValueError(f"log_level must be one of {_LOG_LEVELS}; got {v!r}")
        return upper


def _resolve_paths(data: dict[str, Any], base: Path) -> None:
    for section in ("layout", "demand"):
        block = data.get(section)
        if isinstance(block, dict) and block.get("path"):
            path = Path(block["path"])
            block["path"] = str(path if path.is_absolute() else base / path)


def load_config(path: Path) -> ExperimentConfig:
    """Load an experiment configuration from a TOML file.

    Relative ``layout.path`` and ``demand.path`` values are resolved against
    the directory of *path*.

    Args:
        path: The TOML file.

    Returns:
        The validated configuration, with environment overrides applied.

    Raises:
        ConfigError: If the file is missing, is not valid TOML, or fails
            validation.
    """
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    _resolve_paths(data, path.parent)
    try:
        config = ExperimentConfig(**data)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    logger.debug("Loaded config from %s", path)
    return config


def get_config() -> ExperimentConfig:
    """Return a configuration built from defaults, ``.env`` and the environment.

    Returns:
        An :class:`ExperimentConfig` instance.

    Raises:
        ConfigError: If an environment value fails validation.
    """
    try:
        return ExperimentConfig(
            _env_file=".env",
            _env_file_encoding="utf-8",
        )
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
