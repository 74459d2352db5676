"""Free-flow routing and reservation-based (cooperative A*) planning.

:class:`FreeFlowRouter` answers static questions on the flow network with
arc durations in ticks: shortest routes, distances to a goal and the
planning horizon.  :func:`ca_star_plan` searches the time-expanded graph
``(node, tick)`` for the earliest arrival that avoids every cell slot other
robots have reserved, then reserves its own slots.  Robots planned earlier
keep priority over later ones.

A move started at tick ``t`` needs its target cell free at ``t`` and
``t + 1``; turning and dropping need the current cell for their whole
duration; waiting needs the current cell for the next tick.  Waiting at a
workstation is off the floor and needs nothing.
"""

from __future__ import annotations

import heapq
import logging
from collections.abc import Collection
from dataclasses import dataclass
from functools import cached_property

import networkx as nx

from sortflow.network.graph import ArcKind, Direction, FlowNetwork, NodeKind
from sortflow.sim.state import ReservationTable, TickTiming

logger = logging.getLogger(__name__)

#: Search states expanded before a plan is given up.
MAX_EXPANSIONS: int = 20_000

#: Horizon as a multiple of the longest free-flow trip.
HORIZON_FACTOR: int = 4

_STEP_KINDS = frozenset({ArcKind.MOVE, ArcKind.DEPART, ArcKind.TURN, ArcKind.DROP, ArcKind.ENTRY})


class NoPathWithinHorizon(RuntimeError):
    """Raised when no conflict-free plan reaches the goal inside the horizon."""


@dataclass(frozen=True)
class TimedPath:
    """Nodes with their arrival ticks; ``times[0]`` is the planning tick."""

    nodes: tuple[int, ...]
    times: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.nodes) != len(self.times) or not self.nodes:
            raise ValueError("a timed path needs one arrival tick per node")

    @property
    def duration(self) -> int:
        return self.times[-1] - self.times[0]


class FreeFlowRouter:
    """Static shortest routes over the flow network, durations in ticks."""

    def __init__(self, network: FlowNetwork, timing: TickTiming) -> None:
        self.network = network
        self.timing = timing
        self._distances: dict[int, dict[int, int]] = {}

    def arc_ticks(self, arc: int) -> int:
        kind = self.network.arcs[arc].kind
        if kind in (ArcKind.EXIT, ArcKind.SORTER, ArcKind.REJOIN):
            return 0
        return self.timing.duration(kind)

    def graph_for(self, goal: int) -> nx.DiGraph:
        """Forward graph for drop-off goals, backward graph for workstation goals."""
        kind = self.network.nodes[goal].kind
        if kind is NodeKind.DROPOFF:
            return self.network.routing_graph(Direction.FORWARD)
        if kind is NodeKind.WORKSTATION:
            return self.network.routing_graph(Direction.BACKWARD)
        raise ValueError(f"goal {self.network.label(goal)} is not a station")

    def distance_to(self, goal: int) -> dict[int, int]:
        """Return free-flow ticks from every node that can reach *goal*."""
        if goal not in self._distances:
            graph = self.graph_for(goal).reverse(copy=False)
            self._distances[goal] = nx.single_source_dijkstra_path_length(
                graph, goal, weight=lambda _u, _v, d: self.arc_ticks(d["arc"])
            )
        return self._distances[goal]

    def route(
        self,
        start: int,
        goal: int,
        exclude_cells: Collection[int] = (),
        direction: Direction | None = None,
    ) -> list[int] | None:
        """Return the free-flow shortest route from *start* to *goal*.

        Arcs entering a cell in *exclude_cells* are not used.  *goal* may be
        a cell node when *direction* names the routing graph.  Returns
        ``None`` when no such route exists.
        """
        network = self.network
        excluded = set(exclude_cells)

        def weight(_u: int, v: int, data: dict[str, int]) -> int | None:
            if network.cell_of(v) in excluded and network.cell_of(v) != network.cell_of(start):
                return None
            kind = network.arcs[data["arc"]].kind
            if kind in (ArcKind.DROP, ArcKind.ENTRY) and v != goal:
                return None
            return self.arc_ticks(data["arc"])

        try:
            graph = self.graph_for(goal) if direction is None else network.routing_graph(direction)
            return list(nx.shortest_path(graph, start, goal, weight=weight))
        except (nx.NetworkXNoPath, nx.NodeNotFound):
            return None

    @cached_property
    def horizon(self) -> int:
        """Planning horizon: a multiple of the longest free-flow trip."""
        goals = [self.network.dropoff_node(d) for d in self.network.dropoff_ids]
        goals += [self.network.workstation_node(w) for w in self.network.workstation_ids]
        longest = 1
        for goal in goals:
            table = self.distance_to(goal)
            cells = [v for n, v in table.items() if self.network.nodes[n].kind is NodeKind.CELL]
            longest = max(longest, max(cells, default=0))
        return HORIZON_FACTOR * longest


# ---------------------------------------------------------------------------
# Reservation slots
# ---------------------------------------------------------------------------


def _slots(network: FlowNetwork, u: int, v: int, a: int, b: int) -> list[tuple[int, int]]:
    """Cell slots held on the way from ``(u, a)`` to ``(v, b)``."""
    cu, cv = network.cell_of(u), network.cell_of(v)
    if u == v:
        return [(cu, t) for t in range(a, b + 1)] if cu is not None else []
    kind = network.arcs[network.arc_index[(u, v)]].kind
    out: list[tuple[int, int]] = []
    if kind in (ArcKind.MOVE, ArcKind.DEPART, ArcKind.ENTRY):
        if cu is not None:
            out += [(cu, t) for t in range(a, b)]
        if cv is not None:
            out += [(cv, b - 1), (cv, b)]
    elif cu is not None:
        out += [(cu, t) for t in range(a, b + 1)]
    return out


def path_slots(network: FlowNetwork, path: TimedPath) -> list[tuple[int, int]]:
    """Return every ``(cell, tick)`` slot *path* occupies."""
    out: list[tuple[int, int]] = []
    steps = list(zip(path.nodes, path.times))
    for (u, a), (v, b) in zip(steps, steps[1:]):
        out += _slots(network, u, v, a, b)
    return out


def reserve_path(reservations: ReservationTable, network: FlowNetwork, robot: int, path: TimedPath) -> None:
    """Reserve *path* for *robot*; the start cell at the start tick is skipped if taken."""
    t0 = path.times[0]
    for cell, tick in path_slots(network, path):
        if tick == t0 and not reservations.is_free(cell, tick, robot):
            continue
        reservations.reserve(robot, cell, tick)


# ---------------------------------------------------------------------------
# Cooperative A*
# ---------------------------------------------------------------------------


def ca_star_plan(
    reservations: ReservationTable,
    router: FreeFlowRouter,
    start: int,
    goal: int,
    t0: int,
    robot: int,
    max_expansions: int = MAX_EXPANSIONS,
) -> TimedPath:
    """Plan the earliest conflict-free route from *start* to *goal*, then reserve it.

    Parameters
    ----------
    reservations:
        Slots claimed by earlier plans; the new plan is added to it.
    router:
        Supplies the routing graph, action durations, the admissible
        free-flow heuristic and the horizon.
    start:
        Current node (a cell-heading node, or a workstation for a robot
        about to depart).
    goal:
        Drop-off node (forward trips) or workstation node (returns).
    t0:
        Current tick.
    robot:
        Robot id; its own reservations never block it.
    max_expansions:
        Search effort cap.

    Raises
    ------
    NoPathWithinHorizon
        If the goal is unreachable within ``t0 + horizon`` or the search cap.
    """
    network = router.network
    graph = router.graph_for(goal)
    h = router.distance_to(goal)
    if start not in h:
        raise NoPathWithinHorizon(f"{network.label(goal)} is unreachable from {network.label(start)}")
    limit = t0 + router.horizon

    def feasible(u: int, v: int, a: int, b: int) -> bool:
        cu = network.cell_of(u)
        return all(
            reservations.is_free(cell, tick, robot)
            for cell, tick in _slots(network, u, v, a, b)
            if not (cell == cu and tick == a)
        )

    counter = 0
    heap: list[tuple[int, int, int, int]] = [(t0 + h[start], counter, start, t0)]
    parent: dict[tuple[int, int], tuple[int, int] | None] = {(start, t0): None}
    expansions = 0
    while heap:
        _f, _, node, t = heapq.heappop(heap)
        if node == goal:
            return _finish(reservations, network, robot, parent, (node, t))
        expansions += 1
        if expansions > max_expansions:
            break
        moves: list[tuple[int, int]] = [(node, t + 1)]
        for nxt, data in graph[node].items():
            kind = network.arcs[data["arc"]].kind
            if kind not in _STEP_KINDS:
                continue
            if kind in (ArcKind.DROP, ArcKind.ENTRY) and nxt != goal:
                continue
            moves.append((nxt, t + router.arc_ticks(data["arc"])))
        for nxt, arrival in moves:
            if arrival > limit or nxt not in h or (nxt, arrival) in parent:
                continue
            if not feasible(node, nxt, t, arrival):
                continue
            parent[(nxt, arrival)] = (node, t)
            counter += 1
            heapq.heappush(heap, (arrival + h[nxt], counter, nxt, arrival))
    raise NoPathWithinHorizon(
        f"no conflict-free route from {network.label(start)} to {network.label(goal)} "
        f"within {router.horizon} ticks of {t0}"
    )


def _finish(
    reservations: ReservationTable,
    network: FlowNetwork,
    robot: int,
    parent: dict[tuple[int, int], tuple[int, int] | None],
    state: tuple[int, int],
) -> TimedPath:
    states = []
    current: tuple[int, int] | None = state
    while current is not None:
        states.append(current)
        current = parent[current]
    states.reverse()
    path = TimedPath(tuple(n for n, _ in states), tuple(t for _, t in states))
    reserve_path(reservations, network, robot, path)
    return path
