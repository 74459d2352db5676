"""Mutable simulator state: robots, cell holds, reservations, metrics.

Time is counted in integer ticks of one cell move (``T1``).  A robot that
starts a move at tick *t* holds both its source and its target cell until
it arrives at *t + 1*, so straight-through traffic holds each cell for two
ticks.  Turning, dropping and loading keep the robot where it is for the
configured number of ticks.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import networkx as nx
import numpy as np

from sortflow.decompose.paths import PathFlow
from sortflow.delay.cost import TimingParams
from sortflow.network.graph import ArcKind, Direction, FlowNetwork, IntArray, NodeKind
from sortflow.network.layout import HEADING_ORDER

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class SafetyViolation(RuntimeError):
    """Raised by invariant checking when the simulated floor becomes unsafe.

    Attributes
    ----------
    tick:
        Tick at which the check failed.
    """

    def __init__(self, tick: int, detail: str) -> None:
        super().__init__(f"tick {tick}: {detail}")
        self.tick = tick


# ---------------------------------------------------------------------------
# Timing in ticks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TickTiming:
    """Action durations in whole ticks."""

    turn: int
    load: int
    drop: int

    @classmethod
    def from_timing(cls, timing: TimingParams) -> TickTiming:
        """Convert *timing* to ticks of ``t1``.

        Raises
        ------
        ValueError
            If a duration is not a whole multiple of ``t1`` or a random
            duration is configured.
        """
        if timing.load_second_moment > timing.t_load**2 * (1 + 1e-9):
            raise ValueError("the simulator needs deterministic loading times")
        if timing.drop_second_moment > timing.t_drop**2 * (1 + 1e-9):
            raise ValueError("the simulator needs deterministic dropping times")
        ticks = []
        for name, value in (("t2", timing.t2), ("t_load", timing.t_load), ("t_drop", timing.t_drop)):
            ratio = value / timing.t1
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                raise ValueError(f"{name}={value} is not a whole multiple of t1={timing.t1}")
            ticks.append(int(round(ratio)))
        return cls(*ticks)

    def duration(self, kind: ArcKind) -> int:
        match kind:
            case ArcKind.TURN:
                return self.turn
            case ArcKind.DROP:
                return self.drop
            case ArcKind.LOAD:
                return self.load
            case _:
                return 1


# ---------------------------------------------------------------------------
# Robots
# ---------------------------------------------------------------------------


class RobotMode(str, Enum):
    """What a robot is doing."""

    QUEUED = "queued"
    LOADING = "loading"
    CARRYING = "carrying"
    DROPPING = "dropping"
    RETURNING = "returning"
    TURNING = "turning"


@dataclass
class InFlight:
    """A timed action under way."""

    kind: ArcKind
    arc: int
    source: int
    target: int
    started: int
    ends: int


@dataclass
class Robot:
    """One robot.

    ``node`` is a cell-heading node while on the floor and the workstation
    node while queued, loading or waiting to depart.  ``route`` lists the
    network nodes still to visit with ``route[step]`` the current one;
    ``schedule``, when set, holds the planned arrival tick of each route
    node.  ``goal`` is the station the current trip ends at; a robot with
    ``needs_plan`` set has no valid timed plan towards it yet, and
    ``stalled`` counts its planning attempts that failed in a row.
    """

    id: int
    mode: RobotMode
    workstation: int
    node: int
    cell: int | None = None
    route: list[int] = field(default_factory=list)
    step: int = 0
    schedule: list[int] | None = None
    action: InFlight | None = None
    resume: RobotMode | None = None
    dropoff: int | None = None
    trip_start: int = 0
    goal: int | None = None
    needs_plan: bool = False
    stalled: int = 0

    @property
    def has_route(self) -> bool:
        return self.step + 1 < len(self.route)

    @property
    def next_node(self) -> int | None:
        return self.route[self.step + 1] if self.has_route else None

    def set_route(self, route: list[int], schedule: list[int] | None = None) -> None:
        if route and route[0] != self.node:
            raise ValueError(f"robot {self.id}: route starts at {route[0]}, robot is at {self.node}")
        self.route = route
        self.step = 0
        self.schedule = schedule


@dataclass(frozen=True)
class Parcel:
    """A parcel waiting at a workstation, with its assigned path if any."""

    dropoff: int
    path: PathFlow | None = None


@dataclass
class Server:
    """A workstation's off-grid queue and loading slot."""

    workstation: int
    queue: deque[int] = field(default_factory=deque)
    current: int | None = None
    backlog: deque[Parcel] = field(default_factory=deque)


# ---------------------------------------------------------------------------
# Reservations and blocking
# ---------------------------------------------------------------------------


class ReservationTable:
    """Map from ``(cell, tick)`` to the robot that reserved it.

    Parameters
    ----------
    horizon:
        Reservations more than *horizon* ticks ahead of the last purge are
        refused.
    """

    def __init__(self, horizon: int) -> None:
        self.horizon = horizon
        self._by_tick: dict[int, dict[int, int]] = {}
        self._owned: dict[int, set[tuple[int, int]]] = {}
        self._now = 0

    def __len__(self) -> int:
        return sum(len(slots) for slots in self._by_tick.values())

    def holder(self, cell: int, tick: int) -> int | None:
        slots = self._by_tick.get(tick)
        return None if slots is None else slots.get(cell)

    def is_free(self, cell: int, tick: int, robot: int | None = None) -> bool:
        """Return whether *cell* is unreserved at *tick* (or reserved by *robot*)."""
        holder = self.holder(cell, tick)
        return holder is None or holder == robot

    def claimants(self, cell: int, from_tick: int) -> set[int]:
        """Return the robots holding *cell* at any tick from *from_tick* on."""
        return {
            slots[cell] for tick, slots in self._by_tick.items() if tick >= from_tick and cell in slots
        }

    def reserve(self, robot: int, cell: int, tick: int) -> None:
        """Reserve ``(cell, tick)`` for *robot*.

        Raises
        ------
        ValueError
            If another robot holds the slot or *tick* lies beyond the horizon.
        """
        if tick > self._now + self.horizon:
            raise ValueError(f"tick {tick} is beyond the reservation horizon")
        holder = self.holder(cell, tick)
        if holder is not None and holder != robot:
            raise ValueError(f"cell {cell} at tick {tick} already reserved by robot {holder}")
        self._by_tick.setdefault(tick, {})[cell] = robot
        self._owned.setdefault(robot, set()).add((cell, tick))

    def release(self, robot: int, from_tick: int = 0) -> None:
        """Drop every reservation of *robot* at or after *from_tick*."""
        owned = self._owned.get(robot, set())
        dropped = {slot for slot in owned if slot[1] >= from_tick}
        for cell, tick in dropped:
            slots = self._by_tick.get(tick)
            if slots is not None and slots.get(cell) == robot:
                del slots[cell]
        owned -= dropped

    def purge(self, before: int) -> None:
        """Forget reservations older than *before* and move the horizon."""
        self._now = max(self._now, before)
        for tick in [k for k in self._by_tick if k < before]:
            for cell, robot in self._by_tick.pop(tick).items():
                self._owned[robot].discard((cell, tick))


class WaitForGraph:
    """Directed "blocked by" edges between robots for the current tick."""

    def __init__(self) -> None:
        self.graph = nx.DiGraph()
        self.wanted: dict[int, int] = {}

    def clear(self) -> None:
        self.graph.clear()
        self.wanted.clear()

    def add(self, waiter: int, holder: int, cell: int) -> None:
        """Record that *waiter* wants *cell*, which *holder* occupies."""
        if waiter == holder:
            raise ValueError("a robot cannot wait for itself")
        self.graph.add_edge(waiter, holder)
        self.wanted[waiter] = cell

    def cycles(self) -> list[list[int]]:
        """Return every blocking cycle, each rotated to start at its lowest id."""
        found = []
        for cycle in nx.simple_cycles(self.graph):
            k = cycle.index(min(cycle))
            found.append(cycle[k:] + cycle[:k])
        return sorted(found)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    """Result of one simulated trial.

    Attributes
    ----------
    policy, robots, ticks, seed:
        Trial settings.
    warmup:
        Ticks excluded from every count.
    drops:
        Parcels dropped inside the measurement window.
    throughput:
        ``drops / (ticks - warmup)``.
    deadlocks, unresolved:
        Distinct blocking cycles seen, and those with no detour.
    flagged:
        True when a deadlock inside the window could not be resolved.
    flag_reason:
        What flagged the trial first, or ``None``.
    mean_trip_time:
        Mean ticks from the start of loading to the end of dropping.
    replans:
        Reservation-based plans made after a robot fell behind schedule.
    arc_forward, arc_backward:
        Arc traversals started in the window, by class.
    turning, traversal:
        ``rows x cols`` counts of turns started and of cell entries.
    """

    policy: str
    robots: int
    ticks: int
    seed: int
    warmup: int
    drops: int
    throughput: float
    deadlocks: int
    unresolved: int
    flagged: bool
    flag_reason: str | None
    mean_trip_time: float
    replans: int
    arc_forward: IntArray
    arc_backward: IntArray
    turning: IntArray
    traversal: IntArray

    @property
    def window(self) -> int:
        return self.ticks - self.warmup


class MetricsRecorder:
    """Accumulates counts inside the measurement window."""

    def __init__(self, network: FlowNetwork, ticks: int, warmup: int) -> None:
        self.network = network
        self.ticks = ticks
        self.warmup = warmup
        self.drops = 0
        self.trip_total = 0
        self.deadlocks = 0
        self.unresolved = 0
        self.replans = 0
        self.arc_counts = {
            Direction.FORWARD: np.zeros(network.n_arcs, dtype=np.int64),
            Direction.BACKWARD: np.zeros(network.n_arcs, dtype=np.int64),
        }
        shape = (max(network.rows, 1), max(network.cols, 1))
        self.turning = np.zeros(shape, dtype=np.int64)
        self.traversal = np.zeros(shape, dtype=np.int64)

    def in_window(self, tick: int) -> bool:
        return tick >= self.warmup

    def arc(self, tick: int, arc: int, direction: Direction) -> None:
        if not self.in_window(tick):
            return
        self.arc_counts[direction][arc] += 1
        a = self.network.arcs[arc]
        head = self.network.nodes[a.head]
        if a.kind is ArcKind.TURN and head.kind is NodeKind.CELL:
            self.turning[divmod(head.ident, self.network.cols)] += 1
        elif a.kind in (ArcKind.MOVE, ArcKind.DEPART) and head.kind is NodeKind.CELL:
            self.traversal[divmod(head.ident, self.network.cols)] += 1

    def drop(self, tick: int, trip: int) -> None:
        if self.in_window(tick):
            self.drops += 1
            self.trip_total += trip

    def result(
        self, policy: str, robots: int, seed: int, flagged: bool, flag_reason: str | None = None
    ) -> Metrics:
        window = self.ticks - self.warmup
        return Metrics(
            policy=policy,
            robots=robots,
            ticks=self.ticks,
            seed=seed,
            warmup=self.warmup,
            drops=self.drops,
            throughput=self.drops / window if window > 0 else 0.0,
            deadlocks=self.deadlocks,
            unresolved=self.unresolved,
            flagged=flagged,
            flag_reason=flag_reason,
            mean_trip_time=self.trip_total / self.drops if self.drops else 0.0,
            replans=self.replans,
            arc_forward=self.arc_counts[Direction.FORWARD].copy(),
            arc_backward=self.arc_counts[Direction.BACKWARD].copy(),
            turning=self.turning.copy(),
            traversal=self.traversal.copy(),
        )


# ---------------------------------------------------------------------------
# Whole state
# ---------------------------------------------------------------------------


@dataclass
class SimState:
    """Everything one trial mutates.

    Attributes
    ----------
    network:
        Flow network of the layout (structure only).
    timing:
        Durations in ticks.
    robots:
        Robots by id.
    servers:
        Workstation queues by workstation id.
    held:
        Cell index to the robot holding it; a moving robot holds two cells.
    reservations:
        Reservation table used by planned robots.
    wait_for:
        Blocking edges of the current tick.
    recorder:
        Window counts.
    tick:
        Current tick.
    flagged, flag_reason:
        Set by the first unresolvable deadlock inside the window.
    """

    network: FlowNetwork
    timing: TickTiming
    robots: list[Robot]
    servers: dict[int, Server]
    reservations: ReservationTable
    recorder: MetricsRecorder
    held: dict[int, int] = field(default_factory=dict)
    wait_for: WaitForGraph = field(default_factory=WaitForGraph)
    tick: int = 0
    flagged: bool = False
    flag_reason: str | None = None
    seen_cycles: set[frozenset[int]] = field(default_factory=set)

    @property
    def workstation_ids(self) -> list[int]:
        return sorted(self.servers)

    def cell_nodes(self, cell: int) -> list[int]:
        """Return the heading nodes of *cell*."""
        found = (self.network.cell_node(cell, h) for h in HEADING_ORDER)
        return [n for n in found if n is not None]

    def hold(self, cell: int, robot: int) -> None:
        holder = self.held.get(cell)
        if holder is not None and holder != robot:
            raise SafetyViolation(self.tick, f"robot {robot} entered cell {cell} held by robot {holder}")
        self.held[cell] = robot

    def free(self, cell: int, robot: int) -> None:
        if self.held.get(cell) == robot:
            del self.held[cell]


def check_invariants(state: SimState) -> None:
    """Assert the floor is safe at the current tick.

    Raises
    ------
    SafetyViolation
        If two robots share a cell, a robot's cell is not held by it, or
        an action under way spans non-adjacent cells or has the wrong
        duration.
    """
    network, t = state.network, state.tick
    positions: dict[int, int] = {}
    for robot in state.robots:
        if robot.cell is None:
            continue
        if robot.cell in positions:
            raise SafetyViolation(t, f"robots {positions[robot.cell]} and {robot.id} share cell {robot.cell}")
        positions[robot.cell] = robot.id
        if state.held.get(robot.cell) != robot.id:
            raise SafetyViolation(t, f"robot {robot.id} stands in cell {robot.cell} it does not hold")
        action = robot.action
        if action is None:
            continue
        expected = state.timing.duration(action.kind)
        if action.ends - action.started != expected:
            raise SafetyViolation(t, f"robot {robot.id}: {action.kind.value} lasts {action.ends - action.started} ticks")
        src, dst = network.cell_of(action.source), network.cell_of(action.target)
        if src is not None and dst is not None:
            (r0, c0), (r1, c1) = divmod(src, network.cols), divmod(dst, network.cols)
            if abs(r0 - r1) + abs(c0 - c1) > 1:
                raise SafetyViolation(t, f"robot {robot.id} jumps from cell {src} to cell {dst}")
