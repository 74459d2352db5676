"""End-to-end tests for the offline/online pipeline and the CLI.

Covers:
    1. Pipeline on the corridor fixture: solve, decompose, simulate and
       report write every artifact the store documents.
    2. Offline results are cached by content hash and reused.
    3. CLI verbs and exit codes: validate-layout output, solve, simulate,
       report, configuration errors (1) and infeasible demand (2).
    4. Slow acceptance runs on the standard generated floor: the random
       assignment throughput band at R=20, flow-guided dispatch ahead of
       random assignment and zoning at R=15 and R=20 with at least 5%
       over random, throughput within 5% across design rates 0.04, 0.1
       and 0.2, Spearman correlation above 0.7 between optimal and
       simulated turning, and a 35-robot fleet under invariant checking.

Design notes:
    - Every run writes under pytest's ``tmp_path``; nothing touches the
      repository tree.
    - Fixture data lives in ``tests/integration/fixtures/``.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import pytest

from sortflow.cli.main import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, main
from sortflow.cli.pipeline import Pipeline
from sortflow.config import ExperimentConfig, SimulationSection, load_config
from sortflow.network.graph import Direction
from sortflow.solver.frank_wolfe import InfeasibleDemand
from sortflow.store.artifacts import read_matrix, read_trace
from sortflow.store.models import SummaryRow

_FIXTURES = Path(__file__).parent / "fixtures"
_EXPERIMENT = _FIXTURES / "experiment.toml"
_CORRIDOR = _FIXTURES / "corridor.txt"


def _config(tmp_path: Path) -> ExperimentConfig:
    return load_config(_EXPERIMENT).model_copy(update={"output_dir": tmp_path})


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


class TestPipeline:
    def test_offline(self, tmp_path: Path) -> None:
        pipeline = Pipeline(_config(tmp_path))
        offline = pipeline.decompose()
        store = pipeline.store
        assert store.has_solution(offline.key)
        assert store.has_pathflows(offline.key)
        assert offline.lam == pytest.approx(0.1)
        assert len(offline.pathflows) == 2
        assert offline.pathflows.intensity(Direction.FORWARD, 1) == pytest.approx(0.1)
        assert read_trace(store.trace_path(offline.key))[-1].residual < 1e-9
        assert read_matrix(store.turning_flow_path(offline.key)).shape == (4, 6)

    def test_solution_is_cached(self, tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
        pipeline = Pipeline(_config(tmp_path))
        key, _, flow = pipeline.solve()
        first = pipeline.store.solution_path(key).read_bytes()
        with caplog.at_level(logging.INFO, logger="sortflow.cli.pipeline"):
            again, _, cached = Pipeline(_config(tmp_path)).solve()
        assert again == key
        assert "Reusing cached solution" in caplog.text
        np.testing.assert_array_equal(cached.forward, flow.forward)
        assert pipeline.store.solution_path(key).read_bytes() == first

    def test_key_depends_on_demand(self, tmp_path: Path) -> None:
        pipeline = Pipeline(_config(tmp_path))
        assert pipeline.offline_key(pipeline.demand(0.1)) != pipeline.offline_key(pipeline.demand(0.2))

    def test_infeasible_lambda(self, tmp_path: Path) -> None:
        with pytest.raises(InfeasibleDemand):
            Pipeline(_config(tmp_path)).solve(0.34)

    def test_simulate_and_report(self, tmp_path: Path) -> None:
        pipeline = Pipeline(_config(tmp_path))
        records = pipeline.simulate()
        assert len(records) == 4
        assert sorted((r.group, r.seed) for r in records) == [
            ("flow@0.1", 0),
            ("flow@0.1", 1),
            ("random", 0),
            ("random", 1),
        ]
        for r in records:
            assert r.drops == 11, f"{r.group} seed {r.seed} dropped {r.drops}"
            assert not r.flagged
        assert (pipeline.store.trial_dir("random", 1) / "traversal.csv").is_file()

        rows = pipeline.report()
        assert [(r.group, r.robots, r.trials) for r in rows] == [("flow@0.1", 1, 2), ("random", 1, 2)]
        assert rows[0].improvement_pct == pytest.approx(0.0)
        assert pipeline.store.load_report() == rows
        report = (pipeline.store.report_dir / "report.json").read_text(encoding="utf-8")
        assert '"turning_correlation"' in report


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


class TestCli:
    def test_validate_layout(self, capsys: pytest.CaptureFixture[str]) -> None:
        assert main(["validate-layout", str(_CORRIDOR)]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "workstations=1 dropoffs=1 nodes=22 arcs=28"

    def test_validate_layout_from_config(self, capsys: pytest.CaptureFixture[str]) -> None:
        assert main(["validate-layout", "--config", str(_EXPERIMENT)]) == EXIT_OK
        assert "nodes=22 arcs=28" in capsys.readouterr().out

    def test_bad_layout(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        bad = tmp_path / "bad.txt"
        bad.write_text("2 2\nW1 Q\nD1 E\n", encoding="utf-8")
        assert main(["validate-layout", str(bad)]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert err.startswith("sortflow: error:")
        assert len(err.strip().splitlines()) == 1

    def test_missing_config(self, tmp_path: Path) -> None:
        assert main(["solve", "--config", str(tmp_path / "nope.toml")]) == EXIT_CONFIG

    def test_solve(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        assert main(["solve", "--config", str(_EXPERIMENT), "--out", str(tmp_path)]) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("key=")
        assert Path(out[1]).is_file()

    def test_solve_infeasible(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        argv = ["solve", "--config", str(_EXPERIMENT), "--out", str(tmp_path), "--lambda", "0.34"]
        assert main(argv) == EXIT_INFEASIBLE
        assert capsys.readouterr().err.startswith("sortflow: infeasible:")

    def test_bad_override(self, tmp_path: Path) -> None:
        argv = ["simulate", "--config", str(_EXPERIMENT), "--out", str(tmp_path), "--trials", "0"]
        assert main(argv) == EXIT_CONFIG

    def test_simulate_then_report(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        argv = [
            "simulate",
            "--config",
            str(_EXPERIMENT),
            "--out",
            str(tmp_path),
            "--policies",
            "random",
            "--trials",
            "1",
            "--ticks",
            "200",
        ]
        assert main(argv) == EXIT_OK
        assert capsys.readouterr().out.startswith("trials=1 flagged=0")
        assert main(["report", "--config", str(_EXPERIMENT), "--out", str(tmp_path)]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "group,robots,flagged_only,trials,mean,median,improvement_pct"
        assert lines[1].startswith("random,1,False,1,")


# ---------------------------------------------------------------------------
# Acceptance
# ---------------------------------------------------------------------------


def _standard_battery(
    tmp_path: Path,
    policies: list[str],
    robots: list[int],
    lambdas: list[float] | None = None,
    trials: int = 10,
    check_invariants: bool = False,
) -> Pipeline:
    """Run trials on the standard generated floor and return the pipeline."""
    simulation = SimulationSection(
        policies=policies,
        robots=robots,
        lambdas=lambdas or [0.1],
        ticks=3000,
        trials=trials,
        check_invariants=check_invariants,
    )
    config = ExperimentConfig(output_dir=tmp_path, log_level="WARNING").model_copy(
        update={"simulation": simulation}
    )
    pipeline = Pipeline(config)
    pipeline.simulate()
    return pipeline


def _rows(pipeline: Pipeline) -> dict[tuple[str, int], SummaryRow]:
    return {(r.group, r.robots): r for r in pipeline.report() if not r.flagged_only}


@pytest.mark.slow
class TestAcceptance:
    def test_random_assignment_throughput_band(self, tmp_path: Path) -> None:
        rows = _rows(_standard_battery(tmp_path, ["random"], [20]))
        random = rows[("random", 20)]
        assert 0.27 <= random.mean <= 0.35, f"random assignment at R=20: {random.mean:.4f}"
        assert random.trials >= 8, f"only {random.trials} unflagged trials"

    def test_flow_guided_beats_both_baselines(self, tmp_path: Path) -> None:
        rows = _rows(_standard_battery(tmp_path, ["flow", "random", "zoning"], [15, 20]))
        for robots in (15, 20):
            flow = rows[("flow@0.1", robots)]
            random, zoning = rows[("random", robots)], rows[("zoning", robots)]
            assert flow.mean > random.mean, f"R={robots}: flow {flow.mean:.4f} vs random {random.mean:.4f}"
            assert flow.mean > zoning.mean, f"R={robots}: flow {flow.mean:.4f} vs zoning {zoning.mean:.4f}"
            gain = flow.improvement_pct
            assert gain is not None and gain >= 5.0, f"R={robots}: improvement over random {gain}"

    def test_flow_guided_is_robust_to_the_design_rate(self, tmp_path: Path) -> None:
        rows = _rows(_standard_battery(tmp_path, ["flow"], [20], lambdas=[0.04, 0.1, 0.2]))
        means = {lam: rows[(f"flow@{lam:g}", 20)].mean for lam in (0.04, 0.1, 0.2)}
        low, high = min(means.values()), max(means.values())
        assert low > 0.0
        assert high / low - 1.0 <= 0.05, f"throughput by design rate: {means}"

    def test_simulated_turning_follows_optimal_flow(self, tmp_path: Path) -> None:
        pipeline = _standard_battery(tmp_path, ["flow"], [20])
        pipeline.report()
        report = json.loads((pipeline.store.report_dir / "report.json").read_text(encoding="utf-8"))
        rho = report["turning_correlation"]["flow@0.1/R20"]
        assert rho is not None and rho > 0.7, f"Spearman correlation {rho}"

    def test_full_scale_fleet_stays_safe(self, tmp_path: Path) -> None:
        pipeline = _standard_battery(
            tmp_path, ["flow", "random", "zoning"], [35], trials=1, check_invariants=True
        )
        records = pipeline.store.load_metrics()
        assert len(records) == 3
        for r in records:
            assert r.drops > 0, f"{r.group} dropped nothing"
            assert r.flagged == (r.flag_reason is not None)
