"""Discrete-time simulation of a robotic sorting floor.

Each robot cycles through four stages: it loads a parcel at a workstation,
carries it to the parcel's drop-off, drops it, and returns empty to a
workstation to queue again.  Parcels never run out: a robot reaching the
head of a queue always finds one, its drop-off drawn uniformly.

Design notes
------------
- Every tick runs the same phases in the same order: finish actions due
  now, start loading at idle workstations, let idle robots act (turns,
  drops and entries start at once, cell moves go to traffic control),
  then look for deadlocks.  Robots are always visited in id order.
- Three independent random streams, spawned from the trial seed, drive
  parcel drop-offs, policy draws and traffic tie-breaks.  The same inputs
  and seed give identical metrics.
- Robots under the ``random`` and ``zoning`` policies follow timed plans
  from the reservation planner.  A robot that falls behind its plan (a
  refused move) releases its reservations and plans again from where it
  stands.
- A robot standing in a cell keeps that cell: robots without a timed plan
  claim it for the next tick, and a robot that cannot plan first evicts
  later claims on its cell and tries again.  While it waits it files a
  wait-for edge to the robot holding the next cell of its free-flow route,
  and after ``STALL_LIMIT`` failures in a row it drives that route under
  traffic control instead.
- Parcels drawn for other workstations wait in bounded backlogs, so each
  workstation sees the policy's parcel stream conditioned on itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from sortflow.config import ConfigError
from sortflow.decompose.paths import PathFlow, SplitTable
from sortflow.delay.cost import LinkFlow, SaturatedWorkstation, TimingParams, total_cost
from sortflow.network.graph import ArcKind, Direction, FlowNetwork, NodeKind, build_flow_network
from sortflow.network.layout import Demand, Layout
from sortflow.sim.planner import FreeFlowRouter, NoPathWithinHorizon, TimedPath, ca_star_plan
from sortflow.sim.policies import ParcelArrived, Policy, RobotFreed, make_policy
from sortflow.sim.state import (
    Metrics,
    MetricsRecorder,
    Parcel,
    ReservationTable,
    Robot,
    RobotMode,
    Server,
    SimState,
    TickTiming,
    check_invariants,
)
from sortflow.sim.traffic import begin_action, detect_resolve_deadlocks, next_cell, traffic_control_step

logger = logging.getLogger(__name__)

#: Parcels drawn for other workstations before a queue gets an unassigned one.
PARCEL_ATTEMPTS: int = 64

#: Parcels a workstation's backlog keeps while other workstations draw.
BACKLOG_LIMIT: int = 8

#: Failed plans in a row before a robot falls back to its free-flow route.
STALL_LIMIT: int = 3

#: Default share of ticks excluded from counts.
WARMUP_FRACTION: float = 0.1


class ParcelSource:
    """Endless parcel stream split into per-workstation backlogs.

    Each parcel gets a uniform drop-off and is assigned by the policy.  A
    workstation asking for work takes its own backlog first; parcels drawn
    on its behalf for other workstations join theirs, and are discarded
    once that backlog holds *limit* parcels.

    Parameters
    ----------
    state:
        Trial state; supplies the drop-offs and the workstation servers.
    policy:
        Assigns each parcel a workstation (and a route, for flow dispatch).
    parcel_rng, policy_rng:
        Streams for drop-off draws and policy draws.
    limit:
        Backlog bound for workstations other than the drawing one.
    """

    def __init__(
        self,
        state: SimState,
        policy: Policy,
        parcel_rng: np.random.Generator,
        policy_rng: np.random.Generator,
        limit: int = BACKLOG_LIMIT,
    ) -> None:
        if limit < 0:
            raise ValueError(f"backlog limit must be >= 0, got {limit}")
        self.state = state
        self.policy = policy
        self.parcel_rng = parcel_rng
        self.policy_rng = policy_rng
        self.limit = limit
        self.discarded = 0

    def _draw_dropoff(self) -> int:
        dropoffs = self.state.network.dropoff_ids
        return dropoffs[int(self.parcel_rng.integers(len(dropoffs)))]

    def next_for(self, ws: int) -> Parcel:
        """Return the next parcel for *ws*, drawing new ones as needed.

        After ``PARCEL_ATTEMPTS`` draws for other workstations *ws* gets a
        parcel with no assigned route.
        """
        servers = self.state.servers
        backlog = servers[ws].backlog
        for _ in range(PARCEL_ATTEMPTS):
            if backlog:
                break
            d = self._draw_dropoff()
            assignment = self.policy.assign(self.state, ParcelArrived(d), self.policy_rng)
            target = servers[assignment.workstation].backlog
            if assignment.workstation == ws or len(target) < self.limit:
                target.append(Parcel(d, assignment.path))
            else:
                self.discarded += 1
        if backlog:
            return backlog.popleft()
        logger.debug("Workstation %d gets an unassigned parcel", ws)
        return Parcel(self._draw_dropoff())


class Trial:
    """One simulated trial; owns its state and random streams.

    :func:`simulate` is the usual entry point.  Building a trial directly
    gives access to :attr:`state` between calls to :meth:`step`.
    """

    def __init__(
        self,
        network: FlowNetwork,
        policy: Policy,
        router: FreeFlowRouter,
        robots: int,
        ticks: int,
        seed: int,
        warmup: int,
        check: bool,
    ) -> None:
        parcel_seq, policy_seq, traffic_seq = np.random.SeedSequence(seed).spawn(3)
        self.parcel_rng = np.random.default_rng(parcel_seq)
        self.policy_rng = np.random.default_rng(policy_seq)
        self.traffic_rng = np.random.default_rng(traffic_seq)
        self.network = network
        self.policy = policy
        self.router = router
        self.ticks = ticks
        self.seed = seed
        self.check = check
        self.parcels: dict[int, Parcel] = {}

        servers = {w: Server(w) for w in network.workstation_ids}
        fleet = []
        for rid in range(robots):
            if policy.zones is not None:
                ws = policy.zones.robot_zone[rid]
            else:
                ws = network.workstation_ids[rid % len(network.workstation_ids)]
            fleet.append(Robot(rid, RobotMode.QUEUED, ws, network.workstation_node(ws)))
            servers[ws].queue.append(rid)
        self.state = SimState(
            network=network,
            timing=router.timing,
            robots=fleet,
            servers=servers,
            reservations=ReservationTable(router.horizon),
            recorder=MetricsRecorder(network, ticks, warmup),
        )
        self.source = ParcelSource(self.state, policy, self.parcel_rng, self.policy_rng)

    # -- main loop ----------------------------------------------------------

    def run(self) -> Metrics:
        for t in range(self.ticks):
            self.step(t)
        s = self.state
        return s.recorder.result(self.policy.name, len(s.robots), self.seed, s.flagged, s.flag_reason)

    def step(self, t: int) -> None:
        s = self.state
        s.tick = t
        s.reservations.purge(t)
        s.wait_for.clear()
        for robot in s.robots:
            if robot.action is not None and robot.action.ends == t:
                self._complete(robot)
        for ws in s.workstation_ids:
            self._start_loading(ws)
        if self.policy.uses_planner:
            self._claim_standing()
        requests: dict[int, int] = {}
        for robot in s.robots:
            if robot.action is None:
                arc = self._decide(robot)
                if arc is not None:
                    requests[robot.id] = arc
        traffic_control_step(s, requests, self.traffic_rng)
        detect_resolve_deadlocks(s, self.router)
        if self.check:
            check_invariants(s)

    # -- completions --------------------------------------------------------

    def _complete(self, robot: Robot) -> None:
        s, network = self.state, self.network
        action = robot.action
        assert action is not None
        robot.action = None
        match action.kind:
            case ArcKind.MOVE | ArcKind.DEPART:
                source_cell = network.cell_of(action.source)
                if source_cell is not None:
                    s.free(source_cell, robot.id)
                else:
                    server = s.servers[robot.workstation]
                    if server.current == robot.id:
                        server.current = None
                robot.node = action.target
                robot.cell = network.cell_of(action.target)
                robot.step += 1
            case ArcKind.TURN:
                robot.node = action.target
                robot.step += 1
                robot.mode = robot.resume or RobotMode.RETURNING
                robot.resume = None
            case ArcKind.ENTRY:
                self._enter_workstation(robot, action.target)
            case ArcKind.DROP:
                self._finish_drop(robot, action.target)
            case ArcKind.LOAD:
                self._finish_loading(robot)
            case _:
                raise ValueError(f"robot {robot.id} cannot complete a {action.kind.value} action")

    def _enter_workstation(self, robot: Robot, ws_node: int) -> None:
        s, network = self.state, self.network
        assert robot.cell is not None
        s.free(robot.cell, robot.id)
        ws = network.nodes[ws_node].ident
        s.recorder.arc(s.tick, network.arc_index[(ws_node, network.source)], Direction.BACKWARD)
        s.reservations.release(robot.id)
        robot.workstation = ws
        robot.node = ws_node
        robot.cell = None
        robot.mode = RobotMode.QUEUED
        robot.goal = None
        robot.needs_plan = False
        robot.stalled = 0
        robot.set_route([])
        s.servers[ws].queue.append(robot.id)

    def _finish_drop(self, robot: Robot, d_node: int) -> None:
        s, network = self.state, self.network
        t = s.tick
        s.recorder.drop(t, t - robot.trip_start)
        s.recorder.arc(t, network.arc_index[(d_node, network.sink)], Direction.FORWARD)
        s.recorder.arc(t, network.arc_index[(network.sink, d_node)], Direction.BACKWARD)
        rejoin = network.arc_index.get((d_node, robot.node))
        if rejoin is not None:
            s.recorder.arc(t, rejoin, Direction.BACKWARD)
        s.reservations.release(robot.id)

        d = network.nodes[d_node].ident
        robot.mode = RobotMode.RETURNING
        robot.dropoff = None
        assignment = self.policy.assign(s, RobotFreed(robot.id, d, robot.node), self.policy_rng)
        robot.workstation = assignment.workstation
        robot.goal = network.workstation_node(assignment.workstation)
        if self.policy.uses_planner:
            robot.set_route([robot.node])
            robot.needs_plan = True
        else:
            robot.set_route(self._return_route(robot, assignment.path))

    def _return_route(self, robot: Robot, path: PathFlow | None) -> list[int]:
        network = self.network
        assert robot.goal is not None
        if path is not None:
            core = list(path.nodes[2:-1])
            if core[0] == robot.node:
                return core
            if network.cell_of(core[0]) == robot.cell and (robot.node, core[0]) in network.arc_index:
                return [robot.node, *core]
            connector = self.router.route(robot.node, core[0], direction=Direction.BACKWARD)
            if connector is not None:
                return connector[:-1] + core
        return self._static_route(robot, robot.goal)

    def _static_route(self, robot: Robot, goal: int) -> list[int]:
        route = self.router.route(robot.node, goal)
        if route is None:
            raise RuntimeError(
                f"robot {robot.id} cannot reach {self.network.label(goal)} from {self.network.label(robot.node)}"
            )
        return route

    # -- loading ------------------------------------------------------------

    def _start_loading(self, ws: int) -> None:
        s = self.state
        server = s.servers[ws]
        if server.current is not None or not server.queue:
            return
        robot = s.robots[server.queue.popleft()]
        self.parcels[robot.id] = self.source.next_for(ws)
        server.current = robot.id
        robot.workstation = ws
        robot.trip_start = s.tick
        begin_action(s, robot, self.network.load_arcs[ws])

    def _finish_loading(self, robot: Robot) -> None:
        parcel = self.parcels.pop(robot.id)
        goal = self.network.dropoff_node(parcel.dropoff)
        robot.mode = RobotMode.CARRYING
        robot.dropoff = parcel.dropoff
        robot.goal = goal
        if parcel.path is not None:
            robot.set_route(list(parcel.path.nodes[1:-1]))
        elif self.policy.uses_planner:
            robot.set_route([robot.node])
            robot.needs_plan = True
        else:
            robot.set_route(self._static_route(robot, goal))

    # -- decisions ----------------------------------------------------------

    def _claim_standing(self) -> None:
        """Reserve next tick's cells of floor robots that have no timed plan."""
        s, network = self.state, self.network
        nxt = s.tick + 1
        for robot in s.robots:
            if robot.cell is None or (robot.schedule is not None and not robot.needs_plan):
                continue
            cells = {robot.cell}
            if robot.action is not None:
                target = network.cell_of(robot.action.target)
                if target is not None:
                    cells.add(target)
            for cell in cells:
                if s.reservations.is_free(cell, nxt, robot.id):
                    s.reservations.reserve(robot.id, cell, nxt)

    def _search(self, robot: Robot) -> TimedPath | None:
        s = self.state
        assert robot.goal is not None
        try:
            return ca_star_plan(s.reservations, self.router, robot.node, robot.goal, s.tick, robot.id)
        except NoPathWithinHorizon as exc:
            logger.debug("Tick %d: robot %d cannot plan: %s", s.tick, robot.id, exc)
            return None

    def _evict(self, robot: Robot) -> bool:
        """Cancel later plans through the cell *robot* stands in; return whether any were."""
        s = self.state
        assert robot.cell is not None
        others = s.reservations.claimants(robot.cell, s.tick + 1) - {robot.id}
        for rid in sorted(others):
            other = s.robots[rid]
            keep = other.action.ends + 1 if other.action is not None else s.tick + 1
            s.reservations.release(rid, max(keep, s.tick + 1))
            other.needs_plan = True
        return bool(others)

    def _wait_behind(self, robot: Robot, cell: int | None) -> None:
        """Add a wait-for edge from *robot* to whoever holds *cell*."""
        if cell is None:
            return
        holder = self.state.held.get(cell)
        if holder is not None and holder != robot.id:
            self.state.wait_for.add(robot.id, holder, cell)

    def _plan(self, robot: Robot) -> bool:
        """Give *robot* a timed plan to its goal; return whether it got one."""
        s = self.state
        assert robot.goal is not None
        s.reservations.release(robot.id, s.tick)
        path = self._search(robot)
        if path is None and robot.cell is not None and self._evict(robot):
            path = self._search(robot)
        if path is not None:
            robot.set_route(list(path.nodes), list(path.times))
            robot.needs_plan = False
            robot.stalled = 0
            return True

        robot.stalled += 1
        cell = robot.cell
        if cell is not None and s.reservations.is_free(cell, s.tick + 1, robot.id):
            s.reservations.reserve(robot.id, cell, s.tick + 1)
        free_flow = self.router.route(robot.node, robot.goal)
        if free_flow is None:
            return False
        self._wait_behind(robot, next_cell(self.network, robot, free_flow))
        if robot.stalled >= STALL_LIMIT:
            logger.debug(
                "Tick %d: robot %d drives its free-flow route after %d failed plans",
                s.tick,
                robot.id,
                robot.stalled,
            )
            robot.set_route(free_flow)
            robot.needs_plan = False
            robot.stalled = 0
        return False

    def _decide(self, robot: Robot, replanned: bool = False) -> int | None:
        """Start in-place actions; return the arc of a cell move to request."""
        s, network = self.state, self.network
        if robot.mode is RobotMode.QUEUED:
            return None
        if robot.needs_plan and not self._plan(robot):
            return None
        if not robot.has_route:
            return None
        schedule = robot.schedule
        if schedule is not None:
            while robot.has_route and robot.next_node == robot.node and schedule[robot.step + 1] <= s.tick:
                robot.step += 1
            if not robot.has_route:
                return None
            if robot.next_node == robot.node:
                self._wait_behind(robot, next_cell(self.network, robot, robot.route, robot.step))
                return None
        nxt = robot.next_node
        assert nxt is not None
        arc = network.arc_index[(robot.node, nxt)]
        kind = network.arcs[arc].kind
        if schedule is not None:
            start = schedule[robot.step + 1] - s.timing.duration(kind)
            if s.tick < start:
                self._wait_behind(robot, next_cell(self.network, robot, robot.route, robot.step))
                return None
            if s.tick > start and not replanned:
                if s.recorder.in_window(s.tick):
                    s.recorder.replans += 1
                robot.needs_plan = True
                return self._decide(robot, replanned=True)
        if kind in (ArcKind.MOVE, ArcKind.DEPART):
            return arc
        begin_action(s, robot, arc)
        return None


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def _ordinary_cells(network: FlowNetwork) -> int:
    return len({n.ident for n in network.nodes if n.kind is NodeKind.CELL})


def simulate(
    layout: Layout,
    policy: str,
    timing: TimingParams,
    robots: int,
    ticks: int,
    seed: int,
    *,
    split_table: SplitTable | None = None,
    network: FlowNetwork | None = None,
    check_invariants: bool = False,
    warmup_fraction: float = WARMUP_FRACTION,
) -> Metrics:
    """Run one trial and return its metrics.

    Parameters
    ----------
    layout:
        The floor.
    policy:
        ``"flow"``, ``"random"`` or ``"zoning"``.
    timing:
        Operation times; every value must be a whole multiple of ``t1`` and
        loading/dropping must be deterministic.
    robots:
        Fleet size R; all robots start queued at the workstations.
    ticks:
        Trial length in ticks of ``t1``.
    seed:
        Trial seed.
    split_table:
        Required by the flow policy.
    network:
        Flow network of *layout*, when one has already been built.
    check_invariants:
        Assert floor safety after every tick.
    warmup_fraction:
        Leading share of ticks excluded from every count.

    Raises
    ------
    ConfigError
        For an unknown policy, a flow policy without a split table, a
        network that does not belong to *layout*, more robots than cells,
        a layout without workstations, or timings the simulator cannot run.
    SafetyViolation
        If *check_invariants* is set and the floor becomes unsafe.
    """
    if robots < 0 or ticks < 1:
        raise ConfigError(f"need robots >= 0 and ticks >= 1, got {robots} and {ticks}")
    if not 0.0 <= warmup_fraction < 1.0:
        raise ConfigError(f"warmup_fraction must lie in [0, 1), got {warmup_fraction!r}")
    try:
        tick_timing = TickTiming.from_timing(timing)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if network is None:
        network = build_flow_network(layout, Demand.uniform(layout.dropoff_ids, 0.0))
    elif (network.rows, network.cols) != (layout.rows, layout.cols):
        raise ConfigError("the flow network was built for a different layout")
    if not network.workstation_ids:
        raise ConfigError("the layout has no workstations")
    if robots > _ordinary_cells(network):
        raise ConfigError(f"{robots} robots do not fit on {_ordinary_cells(network)} cells")

    router = FreeFlowRouter(network, tick_timing)
    bound = make_policy(policy, router, robots, split_table)
    warmup = int(round(ticks * warmup_fraction))
    metrics = Trial(network, bound, router, robots, ticks, seed, warmup, check_invariants).run()
    logger.info(
        "Trial %s R=%d seed=%d: %d drops, throughput %.4f%s",
        policy,
        robots,
        seed,
        metrics.drops,
        metrics.throughput,
        " (flagged)" if metrics.flagged else "",
    )
    return metrics


@dataclass(frozen=True)
class Accuracy:
    """Total cost predicted from measured arc flows against the measured value."""

    predicted: float
    measured: float
    relative_error: float


def measured_flow(metrics: Metrics) -> LinkFlow:
    """Return the trial's arc traversals per tick over the measurement window."""
    window = max(metrics.window, 1)
    return LinkFlow(metrics.arc_forward / window, metrics.arc_backward / window)


def predicted_vs_measured(network: FlowNetwork, metrics: Metrics, timing: TimingParams) -> Accuracy:
    """Compare the delay model's total cost at the measured flows with the fleet size.

    Every robot is always somewhere in its cycle, so the measured robot-time
    per tick equals R.  A saturated workstation makes the prediction
    infinite.
    """
    try:
        predicted = total_cost(network, measured_flow(metrics), timing)
    except SaturatedWorkstation:
        predicted = float("inf")
    measured = float(metrics.robots)
    if measured == 0.0:
        return Accuracy(predicted, measured, 0.0 if predicted == 0.0 else float("inf"))
    return Accuracy(predicted, measured, (predicted - measured) / measured)
