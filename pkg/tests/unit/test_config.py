"""Tests for sortflow.config.

Covers:
    - load_config on the fixture experiment: sections, relative paths
      resolved against the TOML file's directory.
    - SORTFLOW_* environment variables override file values, nested keys
      included.
    - log_level normalisation and rejection.
    - ConfigError for a missing file, bad TOML and invalid values.
    - TimingSection moments and whole-tick checks.
    - DemandSection.build from a CSV or a uniform λ.
    - get_config defaults.
"""

from __future__ import annotations

from pathlib import Path

import pytest
from pydantic import ValidationError

from sortflow.config import (
    ConfigError,
    DemandSection,
    ExperimentConfig,
    SimulationSection,
    TimingSection,
    get_config,
    load_config,
)

# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

_FIXTURES = Path(__file__).parent.parent / "integration" / "fixtures"
_EXPERIMENT = _FIXTURES / "experiment.toml"


def _write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "experiment.toml"
    path.write_text(text, encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


class TestLoadConfig:
    def test_fixture(self) -> None:
        config = load_config(_EXPERIMENT)
        assert config.layout.path == _FIXTURES / "corridor.txt"
        assert config.solver.max_iter == 50
        assert config.simulation.policies == ["flow", "random"]
        assert config.simulation.robots == [1]
        assert config.simulation.trial_seeds == [0, 1]
        assert config.log_level == "WARNING"

    def test_absolute_path_kept(self, tmp_path: Path) -> None:
        layout = (_FIXTURES / "corridor.txt").resolve()
        path = _write(tmp_path, f'[layout]\npath = "{layout.as_posix()}"\n')
        assert load_config(path).layout.path == layout

    def test_defaults(self, tmp_path: Path) -> None:
        config = load_config(_write(tmp_path, ""))
        assert config.layout.path is None
        assert (config.layout.rows, config.layout.cols) == (19, 20)
        assert config.timing.to_params().t2 == 4.0
        assert config.simulation.robots == [10, 15, 20, 25, 30, 35]
        assert config.output_dir == Path("out")

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(tmp_path / "nope.toml")

    def test_bad_toml(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path, "[solver\nmax_iter = 3\n"))

    def test_missing_layout_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError, match="layout file"):
            load_config(_write(tmp_path, '[layout]\npath = "missing.txt"\n'))

    @pytest.mark.parametrize(
        "text",
        [
            '[simulation]\npolicies = ["greedy"]\n',
            "[simulation]\nrobots = []\n",
            "[simulation]\nwarmup_fraction = 1.0\n",
            "[solver]\nmax_iter = 0\n",
            "[timing]\nt2 = 2.5\n",
        ],
        ids=["policy", "robots", "warmup", "max-iter", "fractional-t2"],
    )
    def test_invalid_values(self, tmp_path: Path, text: str) -> None:
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path, text))


# ---------------------------------------------------------------------------
# Environment overrides
# ---------------------------------------------------------------------------


class TestEnvironment:
    def test_nested_override(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv("SORTFLOW_SOLVER__MAX_ITER", "7")
        config = load_config(_EXPERIMENT)
        assert config.solver.max_iter == 7
        assert config.solver.epsilon == 1e-6

    def test_top_level_override(self, monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
        monkeypatch.setenv("SORTFLOW_OUTPUT_DIR", str(tmp_path))
        assert load_config(_EXPERIMENT).output_dir == tmp_path

    def test_log_level_is_uppercased(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv("SORTFLOW_LOG_LEVEL", "debug")
        assert load_config(_EXPERIMENT).log_level == "DEBUG"

    def test_bad_log_level(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv("SORTFLOW_LOG_LEVEL", "VERBOSE")
        with pytest.raises(ConfigError, match="log_level"):
            load_config(_EXPERIMENT)

    def test_get_config(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv("SORTFLOW_SIMULATION__TICKS", "500")
        config = get_config()
        assert isinstance(config, ExperimentConfig)
        assert config.simulation.ticks == 500
        assert config.log_level == "INFO"

    def test_get_config_rejects_bad_env(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv("SORTFLOW_SOLVER__MAX_ITER", "zero")
        with pytest.raises(ConfigError):
            get_config()


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------


class TestSections:
    def test_timing_second_moment(self) -> None:
        with pytest.raises(ValidationError, match="t_load_sq"):
            TimingSection(t_load=3.0, t_load_sq=4.0)

    def test_timing_scaled_by_t1(self) -> None:
        section = TimingSection(t1=0.5, t2=2.0, t_load=1.5, t_drop=0.5)
        assert section.to_params().t1 == 0.5

    def test_demand_from_csv(self) -> None:
        demand = DemandSection(path=_FIXTURES / "corridor_demand.csv").build([1])
        assert demand.per_dropoff == {1: 0.1}

    def test_demand_override_ignores_csv(self) -> None:
        demand = DemandSection(path=_FIXTURES / "corridor_demand.csv").build([1, 2], lam=0.4)
        assert demand.per_dropoff == {1: pytest.approx(0.2), 2: pytest.approx(0.2)}

    def test_demand_uniform(self) -> None:
        assert DemandSection(lam=0.3).build([1, 2, 3]).total == pytest.approx(0.3)

    def test_simulation_policies_not_empty(self) -> None:
        with pytest.raises(ValidationError, match="must not be empty"):
            SimulationSection(policies=[])
