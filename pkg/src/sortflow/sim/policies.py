"""Assignment policies: who serves a parcel and where a freed robot returns.

A policy answers two events.  :class:`ParcelArrived` asks which workstation
(and, for the flow-guided policy, which route) handles a new parcel;
:class:`RobotFreed` asks where a robot that just dropped goes next.

- ``flow`` draws (workstation, route) pairs from the split table, in
  proportion to the optimal path-flow intensities.  Robots then follow the
  drawn route under one-cell-lookahead traffic control.
- ``random`` picks a workstation uniformly; routes come from the
  reservation-based planner.
- ``zoning`` partitions drop-offs by their nearest workstation and gives
  each zone its own share of the fleet; routes come from the planner.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from sortflow.config import POLICY_NAMES, ConfigError
from sortflow.decompose.paths import PathFlow, SplitTable
from sortflow.network.graph import Direction
from sortflow.sim.planner import FreeFlowRouter
from sortflow.sim.state import SimState

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Events and assignments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParcelArrived:
    """A parcel for *dropoff* needs a workstation."""

    dropoff: int


@dataclass(frozen=True)
class RobotFreed:
    """Robot *robot* finished dropping at *dropoff* and stands on *node*."""

    robot: int
    dropoff: int
    node: int


Event = ParcelArrived | RobotFreed


@dataclass(frozen=True)
class Assignment:
    """A workstation plus, for flow-guided dispatch, the route to follow."""

    workstation: int
    path: PathFlow | None = None


# ---------------------------------------------------------------------------
# Policy functions
# ---------------------------------------------------------------------------


def policy_flow_guided(
    state: SimState, event: Event, split: SplitTable, rng: np.random.Generator
) -> Assignment:
    """Draw a (workstation, route) pair from the split table.

    Returns after a drop are narrowed to paths leaving from the robot's
    current cell when the table has any.

    Raises
    ------
    MissingDirection
        If the table has no paths for the drop-off in that direction.
    """
    match event:
        case ParcelArrived(dropoff=d):
            path = split.draw(Direction.FORWARD, d, rng)
        case RobotFreed(dropoff=d, node=node):
            cell = state.network.cell_of(node)
            nodes = state.cell_nodes(cell) if cell is not None else None
            path = split.draw(Direction.BACKWARD, d, rng, start_node=nodes)
        case _:
            raise TypeError(f"unknown event {event!r}")
    return Assignment(path.workstation, path)


def policy_random(state: SimState, event: Event, rng: np.random.Generator) -> Assignment:
    """Pick a workstation uniformly at random.

    Raises
    ------
    ConfigError
        If the layout has no workstations.
    """
    ids = state.workstation_ids
    if not ids:
        raise ConfigError("random assignment needs at least one workstation")
    return Assignment(ids[int(rng.integers(len(ids)))])


@dataclass(frozen=True)
class ZoneMap:
    """Drop-off and robot ownership per workstation zone."""

    dropoff_zone: dict[int, int]
    robot_zone: dict[int, int]

    def zone_sizes(self) -> dict[int, int]:
        sizes: dict[int, int] = {}
        for ws in self.robot_zone.values():
            sizes[ws] = sizes.get(ws, 0) + 1
        return sizes


def build_zone_map(router: FreeFlowRouter, robots: int) -> ZoneMap:
    """Split drop-offs by nearest workstation and the fleet evenly across zones.

    Distance is the free-flow forward trip time from the workstation; ties go
    to the lower workstation id.  Robots take contiguous id ranges, the
    remainder going to the lower zones.

    Raises
    ------
    ConfigError
        If no workstation can reach any drop-off.
    """
    network = router.network
    dropoff_zone: dict[int, int] = {}
    for d in network.dropoff_ids:
        dist = router.distance_to(network.dropoff_node(d))
        reachable = [
            (dist[network.workstation_node(w)], w)
            for w in network.workstation_ids
            if network.workstation_node(w) in dist
        ]
        if reachable:
            dropoff_zone[d] = min(reachable)[1]
    zones = sorted(set(dropoff_zone.values()))
    if not zones:
        raise ConfigError("zoning needs at least one workstation that reaches a drop-off")
    empty = sorted(set(network.workstation_ids) - set(zones))
    if empty:
        logger.info("Zoning leaves workstations %s without drop-offs or robots", empty)

    base, extra = divmod(robots, len(zones))
    robot_zone: dict[int, int] = {}
    next_id = 0
    for k, ws in enumerate(zones):
        for _ in range(base + (1 if k < extra else 0)):
            robot_zone[next_id] = ws
            next_id += 1
    return ZoneMap(dropoff_zone, robot_zone)


def policy_zoning(state: SimState, event: Event, zones: ZoneMap) -> Assignment:
    """Send parcels to their drop-off's zone and robots back to their own zone."""
    match event:
        case ParcelArrived(dropoff=d):
            return Assignment(zones.dropoff_zone[d])
        case RobotFreed(robot=r):
            return Assignment(zones.robot_zone[r])
    raise TypeError(f"unknown event {event!r}")


# ---------------------------------------------------------------------------
# Policy objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Policy:
    """A named assignment rule bound to its tables.

    ``uses_planner`` is true when routes come from the reservation-based
    planner instead of the assignment itself.
    """

    name: str
    uses_planner: bool
    assign: Callable[[SimState, Event, np.random.Generator], Assignment]
    zones: ZoneMap | None = None


def make_policy(
    name: str,
    router: FreeFlowRouter,
    robots: int,
    split_table: SplitTable | None = None,
) -> Policy:
    """Bind policy *name* to the tables it needs.

    Raises
    ------
    ConfigError
        For an unknown name, a flow-guided policy without a split table, or
        a zoning that cannot be built.
    """
    match name:
        case "flow":
            if split_table is None:
                raise ConfigError("the flow policy needs a split table")
            table = split_table
            return Policy(name, False, lambda s, e, rng: policy_flow_guided(s, e, table, rng))
        case "random":
            return Policy(name, True, policy_random)
        case "zoning":
            zones = build_zone_map(router, robots)
            return Policy(name, True, lambda s, e, _rng: policy_zoning(s, e, zones), zones)
    raise ConfigError(f"unknown policy {name!r}; expected one of {sorted(POLICY_NAMES)}")
