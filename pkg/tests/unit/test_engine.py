"""Tests for sortflow.sim.engine.

Covers:
    - A single robot on the corridor floor: 32-tick cycle, first drop at
      tick 7, trip time and throughput, for both the planned and the
      flow-guided policies.
    - Several robots with invariant checking for every policy, and a
      dense planned fleet on a generated floor that keeps dropping.
    - Planning failures: a robot that cannot plan waits behind the robot
      in its way, falls back to its free-flow route after STALL_LIMIT
      tries, and evicts later plans through the cell it stands in.
    - ParcelSource keeps other workstations' backlogs bounded.
    - Same seed gives the same metrics.
    - ConfigError for bad arguments.
    - measured_flow and predicted_vs_measured.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import pytest

from sortflow.config import ConfigError
from sortflow.decompose.paths import SplitTable, build_split_table, decompose_flow
from sortflow.delay.cost import TimingParams, conservation_residual
from sortflow.network.generator import generate_standard_layout
from sortflow.network.graph import FlowNetwork, build_flow_network
from sortflow.network.layout import Demand, Layout, parse_layout
from sortflow.sim.engine import (
    PARCEL_ATTEMPTS,
    STALL_LIMIT,
    ParcelSource,
    Trial,
    measured_flow,
    predicted_vs_measured,
    simulate,
)
from sortflow.sim.planner import FreeFlowRouter
from sortflow.sim.policies import Assignment, Policy, make_policy
from sortflow.sim.state import Metrics, Robot, RobotMode, TickTiming
from sortflow.solver.frank_wolfe import frank_wolfe

# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

_FIXTURES = Path(__file__).parent.parent / "integration" / "fixtures"

_TIMING = TimingParams()

#: One robot completes a loop (load, carry, drop, return) every 32 ticks.
_CYCLE = 32


def _layout() -> Layout:
    return parse_layout((_FIXTURES / "corridor.txt").read_text(encoding="utf-8"))


def _network(layout: Layout) -> FlowNetwork:
    return build_flow_network(layout, Demand.uniform(layout.dropoff_ids, 0.1))


def _split(network: FlowNetwork) -> SplitTable:
    flow, _ = frank_wolfe(network, None, _TIMING)
    return build_split_table(decompose_flow(network, flow, np.random.default_rng(0)))


def _run(policy: str, robots: int, ticks: int, seed: int = 0, **kwargs: Any) -> Metrics:
    layout = _layout()
    network = _network(layout)
    split = _split(network) if policy == "flow" else None
    return simulate(
        layout, policy, _TIMING, robots, ticks, seed, split_table=split, network=network, **kwargs
    )


def _trial(network: FlowNetwork, robots: int, policy: str = "random") -> Trial:
    """A trial whose robots have all been taken out of the workstation queues."""
    router = FreeFlowRouter(network, TickTiming.from_timing(_TIMING))
    trial = Trial(network, make_policy(policy, router, robots), router, robots, 100, 0, warmup=0, check=False)
    for server in trial.state.servers.values():
        server.queue.clear()
    return trial


def _place(trial: Trial, rid: int, label: str, schedule: list[int] | None = None) -> Robot:
    """Stand robot *rid* on *label*, heading home; without *schedule* it needs a plan."""
    network = trial.network
    robot = trial.state.robots[rid]
    robot.mode = RobotMode.RETURNING
    robot.node = network.label_index[label]
    robot.cell = network.cell_of(robot.node)
    robot.goal = network.workstation_node(1)
    assert robot.cell is not None
    trial.state.held[robot.cell] = rid
    if schedule is None:
        robot.set_route([robot.node])
        robot.needs_plan = True
    else:
        robot.set_route([robot.node] * len(schedule), schedule)
    return robot


# ---------------------------------------------------------------------------
# One robot
# ---------------------------------------------------------------------------


class TestSingleRobot:
    @pytest.mark.parametrize("policy", ["random", "flow", "zoning"])
    def test_cycle(self, policy: str) -> None:
        metrics = _run(policy, robots=1, ticks=3000)
        assert metrics.warmup == 300
        assert metrics.drops == 84
        assert metrics.throughput == pytest.approx(1 / _CYCLE, abs=1 / 2700)
        assert metrics.mean_trip_time == pytest.approx(7.0)
        assert metrics.deadlocks == 0
        assert not metrics.flagged

    def test_short_trial(self) -> None:
        metrics = _run("random", robots=1, ticks=400)
        assert metrics.drops == 11

    def test_turns_are_counted_on_the_corners(self) -> None:
        metrics = _run("flow", robots=1, ticks=400)
        turning = metrics.turning
        assert turning.shape == (4, 6)
        assert set(zip(*np.nonzero(turning))) == {(0, 5), (3, 5), (3, 0)}

    def test_measured_flow_matches_demand(self) -> None:
        layout = _layout()
        network = _network(layout)
        metrics = simulate(layout, "flow", _TIMING, 1, 3000, 0, split_table=_split(network), network=network)
        flow = measured_flow(metrics)
        assert flow.forward[network.load_arcs[1]] == pytest.approx(1 / _CYCLE, abs=2 / 2700)
        assert conservation_residual(network.with_demand(Demand({1: metrics.throughput})), flow) < 2 / 2700

    def test_predicted_vs_measured(self) -> None:
        layout = _layout()
        network = _network(layout)
        metrics = simulate(layout, "random", _TIMING, 1, 3000, 0, network=network)
        accuracy = predicted_vs_measured(network, metrics, _TIMING)
        assert accuracy.measured == 1.0
        assert abs(accuracy.relative_error) < 0.15


# ---------------------------------------------------------------------------
# Several robots
# ---------------------------------------------------------------------------


class TestFleet:
    @pytest.mark.parametrize("policy", ["random", "flow", "zoning"])
    def test_invariants_hold(self, policy: str) -> None:
        metrics = _run(policy, robots=3, ticks=600, check_invariants=True)
        assert metrics.drops > 0
        assert metrics.robots == 3

    def test_same_seed_same_metrics(self) -> None:
        a = _run("random", robots=3, ticks=300, seed=5)
        b = _run("random", robots=3, ticks=300, seed=5)
        assert a.drops == b.drops
        np.testing.assert_array_equal(a.arc_forward, b.arc_forward)
        np.testing.assert_array_equal(a.traversal, b.traversal)

    def test_no_robots(self) -> None:
        layout = _layout()
        network = _network(layout)
        metrics = simulate(layout, "random", _TIMING, 0, 50, 0, network=network)
        assert metrics.drops == 0
        accuracy = predicted_vs_measured(network, metrics, _TIMING)
        assert accuracy.relative_error == 0.0

    @pytest.mark.parametrize("policy", ["random", "zoning"])
    def test_dense_planned_fleet_keeps_dropping(self, policy: str) -> None:
        layout = generate_standard_layout(11, 12, 2, 8, seed=1)
        network = build_flow_network(layout, Demand.uniform(layout.dropoff_ids, 0.0))
        metrics = simulate(layout, policy, _TIMING, 12, 1000, 3, network=network, check_invariants=True)
        assert metrics.throughput > 0.05, f"{policy}: throughput {metrics.throughput:.4f}, replans {metrics.replans}"


# ---------------------------------------------------------------------------
# Argument errors
# ---------------------------------------------------------------------------


class TestSimulateErrors:
    def test_unknown_policy(self) -> None:
        with pytest.raises(ConfigError, match="unknown policy"):
            simulate(_layout(), "greedy", _TIMING, 1, 10, 0)

    def test_flow_without_split_table(self) -> None:
        with pytest.raises(ConfigError, match="split table"):
            simulate(_layout(), "flow", _TIMING, 1, 10, 0)

    def test_too_many_robots(self) -> None:
        with pytest.raises(ConfigError, match="do not fit"):
            simulate(_layout(), "random", _TIMING, 16, 10, 0)

    @pytest.mark.parametrize(("robots", "ticks"), [(-1, 10), (1, 0)])
    def test_bad_counts(self, robots: int, ticks: int) -> None:
        with pytest.raises(ConfigError):
            simulate(_layout(), "random", _TIMING, robots, ticks, 0)

    def test_bad_warmup(self) -> None:
        with pytest.raises(ConfigError, match="warmup_fraction"):
            simulate(_layout(), "random", _TIMING, 1, 10, 0, warmup_fraction=1.0)

    def test_fractional_timing(self) -> None:
        with pytest.raises(ConfigError, match="whole multiple"):
            simulate(_layout(), "random", TimingParams(t2=2.5), 1, 10, 0)

    def test_network_of_another_layout(self) -> None:
        network = _network(_layout())
        wide = parse_layout(
            "4 7\n"
            "W1 E  E  E  E  E  ES\n"
            "N  .  .  D1 .  .  S\n"
            "N  .  .  .  .  .  S\n"
            "NW W  W  W  W  W  SW\n"
        )
        with pytest.raises(ConfigError, match="different layout"):
            simulate(wide, "random", _TIMING, 1, 10, 0, network=network)


# ---------------------------------------------------------------------------
# Planning failures
# ---------------------------------------------------------------------------


class TestPlanningFailures:
    def test_blocked_robot_waits_then_drives_its_route(self) -> None:
        network = _network(_layout())
        trial = _trial(network, robots=2)
        state = trial.state
        stuck = _place(trial, 0, "r3c2W")
        _place(trial, 1, "r3c1W", schedule=[0, 10**6])
        for tick in range(trial.router.horizon + 1):
            state.reservations.reserve(1, 19, tick)

        trial.step(0)
        assert stuck.stalled == 1
        assert stuck.needs_plan
        assert list(state.wait_for.graph.edges) == [(0, 1)]
        assert state.wait_for.wanted[0] == 19
        assert state.reservations.holder(20, 1) == 0

        for tick in range(1, STALL_LIMIT):
            trial.step(tick)
        assert not stuck.needs_plan
        assert stuck.stalled == 0
        assert stuck.schedule is None
        assert network.label(stuck.route[0]) == "r3c2W"
        assert stuck.route[-1] == network.workstation_node(1)

        trial.step(STALL_LIMIT)
        assert list(state.wait_for.graph.edges) == [(0, 1)], "the refused move keeps the edge"

    def test_standing_robot_evicts_plans_through_its_cell(self) -> None:
        network = _network(_layout())
        trial = _trial(network, robots=2)
        state = trial.state
        standing = _place(trial, 0, "r3c2W")
        other = _place(trial, 1, "r0c3E", schedule=[0, 10**6])
        for tick in range(0, 4):
            state.reservations.reserve(1, 19, tick)
        for tick in range(1, 11):
            state.reservations.reserve(1, 20, tick)

        trial.step(0)
        assert not standing.needs_plan
        assert standing.schedule is not None
        assert standing.stalled == 0
        assert state.reservations.holder(20, 1) == 0
        assert other.schedule is not None and other.schedule[-1] != 10**6, "robot 1 planned again"
        assert not other.needs_plan


# ---------------------------------------------------------------------------
# Parcel stream
# ---------------------------------------------------------------------------


def _to_second_workstation(_state: object, _event: object, _rng: np.random.Generator) -> Assignment:
    return Assignment(2)


class TestParcelSource:
    def test_other_backlogs_are_bounded(self) -> None:
        layout = generate_standard_layout(7, 8, 2, 2, seed=0)
        network = build_flow_network(layout, Demand.uniform(layout.dropoff_ids, 0.0))
        trial = _trial(network, robots=0)
        policy = Policy("second", True, _to_second_workstation)
        source = ParcelSource(trial.state, policy, np.random.default_rng(0), np.random.default_rng(1), limit=3)
        for _ in range(5):
            parcel = source.next_for(1)
            assert parcel.path is None
            assert parcel.dropoff in network.dropoff_ids
        backlog = trial.state.servers[2].backlog
        assert len(backlog) == 3
        assert not trial.state.servers[1].backlog
        assert source.discarded == 5 * PARCEL_ATTEMPTS - 3
        first = backlog[0]
        assert source.next_for(2) == first
        assert len(backlog) == 2

    def test_own_parcels_are_never_discarded(self) -> None:
        layout = generate_standard_layout(7, 8, 2, 2, seed=0)
        network = build_flow_network(layout, Demand.uniform(layout.dropoff_ids, 0.0))
        trial = _trial(network, robots=0)
        policy = Policy("second", True, _to_second_workstation)
        source = ParcelSource(trial.state, policy, np.random.default_rng(0), np.random.default_rng(1), limit=0)
        source.next_for(2)
        assert source.discarded == 0

    def test_negative_limit(self) -> None:
        network = _network(_layout())
        trial = _trial(network, robots=0)
        with pytest.raises(ValueError, match="backlog limit"):
            ParcelSource(trial.state, trial.policy, np.random.default_rng(0), np.random.default_rng(0), limit=-1)
