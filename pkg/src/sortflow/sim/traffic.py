"""One-cell-lookahead traffic control and deadlock handling.

Each tick, robots that want to enter a cell file a request.  A request is
granted when the target cell is free after the moves already under way;
several requests for one free cell are settled by a fair seeded draw.
Refused robots wait in place and get a "blocked by" edge in the wait-for
graph.  Cycles in that graph are deadlocks: one robot of each cycle is sent
along a static detour that keeps clear of the cells the cycle is jammed
on, preferring a robot whose detour starts into a free cell.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Mapping, Sequence

import numpy as np

from sortflow.network.graph import ArcKind, Direction, FlowNetwork
from sortflow.sim.planner import FreeFlowRouter
from sortflow.sim.state import InFlight, Robot, RobotMode, SimState

logger = logging.getLogger(__name__)

_FORWARD_ONLY = frozenset({ArcKind.LOAD, ArcKind.DEPART, ArcKind.DROP})
_BACKWARD_ONLY = frozenset({ArcKind.ENTRY, ArcKind.SORTER, ArcKind.REJOIN})


def travel_direction(robot: Robot, kind: ArcKind) -> Direction:
    """Class an arc traversal is counted in: loaded or empty."""
    if kind in _FORWARD_ONLY:
        return Direction.FORWARD
    if kind in _BACKWARD_ONLY:
        return Direction.BACKWARD
    mode = robot.resume if robot.mode is RobotMode.TURNING else robot.mode
    return Direction.FORWARD if mode is RobotMode.CARRYING else Direction.BACKWARD


def begin_action(state: SimState, robot: Robot, arc: int) -> None:
    """Start *robot* along *arc* at the current tick and count it."""
    a = state.network.arcs[arc]
    t = state.tick
    state.recorder.arc(t, arc, travel_direction(robot, a.kind))
    robot.action = InFlight(a.kind, arc, a.tail, a.head, t, t + state.timing.duration(a.kind))
    match a.kind:
        case ArcKind.MOVE | ArcKind.DEPART:
            cell = state.network.cell_of(a.head)
            assert cell is not None
            state.hold(cell, robot.id)
        case ArcKind.TURN:
            robot.resume = robot.mode
            robot.mode = RobotMode.TURNING
        case ArcKind.DROP:
            robot.mode = RobotMode.DROPPING
        case ArcKind.LOAD:
            robot.mode = RobotMode.LOADING
        case _:
            pass


def traffic_control_step(
    state: SimState, requests: Mapping[int, int], rng: np.random.Generator
) -> dict[int, bool]:
    """Grant or refuse this tick's cell-entry requests.

    Parameters
    ----------
    state:
        Current state; granted moves start immediately and refused ones
        add wait-for edges.
    requests:
        Robot id to the MOVE or DEPART arc it wants to take.
    rng:
        Tie-break stream.

    Returns
    -------
    dict[int, bool]
        Whether each requesting robot moves.
    """
    network = state.network
    by_cell: dict[int, list[int]] = defaultdict(list)
    for rid in sorted(requests):
        cell = network.cell_of(network.arcs[requests[rid]].head)
        if cell is None:
            raise ValueError(f"robot {rid} requested arc {requests[rid]}, which does not enter a cell")
        by_cell[cell].append(rid)

    granted: dict[int, bool] = {}
    for cell in sorted(by_cell):
        contenders = by_cell[cell]
        holder = state.held.get(cell)
        if holder is not None:
            for rid in contenders:
                granted[rid] = False
                if rid != holder:
                    state.wait_for.add(rid, holder, cell)
            continue
        winner = contenders[int(rng.integers(len(contenders)))] if len(contenders) > 1 else contenders[0]
        begin_action(state, state.robots[winner], requests[winner])
        for rid in contenders:
            granted[rid] = rid == winner
            if rid != winner:
                state.wait_for.add(rid, winner, cell)
    return granted


def next_cell(network: FlowNetwork, robot: Robot, route: Sequence[int], step: int = 0) -> int | None:
    """Return the first cell after ``route[step]`` other than the one *robot* stands in."""
    for node in route[step + 1:]:
        cell = network.cell_of(node)
        if cell is not None and cell != robot.cell:
            return cell
    return None


def _pick_detour(
    state: SimState, router: FreeFlowRouter, cycle: list[int]
) -> tuple[Robot, list[int], int] | None:
    """Choose which member of *cycle* to reroute, and along which route.

    Detours avoid every cell the cycle stands in or waits for.  Members are
    tried in id order; the first whose detour starts into a free cell wins,
    otherwise the lowest-id member with any detour.  When no member can
    leave the cycle's cells, each member's own blocked cell is the only one
    avoided.
    """
    wanted = state.wait_for.wanted
    members = [state.robots[rid] for rid in sorted(cycle)]
    jammed = {wanted[r.id] for r in members} | {r.cell for r in members if r.cell is not None}
    for narrow in (False, True):
        fallback: tuple[Robot, list[int], int] | None = None
        for robot in members:
            goal = robot.goal if robot.goal is not None else (robot.route[-1] if robot.route else None)
            if goal is None:
                continue
            avoid = {wanted[robot.id]} if narrow else jammed
            detour = router.route(robot.node, goal, exclude_cells=avoid)
            if detour is None:
                continue
            first = next_cell(state.network, robot, detour)
            if first is None or first not in state.held:
                return robot, detour, wanted[robot.id]
            if fallback is None:
                fallback = (robot, detour, wanted[robot.id])
        if fallback is not None:
            return fallback
    return None


def detect_resolve_deadlocks(state: SimState, router: FreeFlowRouter) -> set[int]:
    """Find blocking cycles and reroute one robot out of each.

    A cycle still present from the previous tick is not counted again,
    except on the first tick of the measurement window so that a deadlock
    carried over from the warm-up is counted once.  When no member of a
    cycle has a detour the deadlock is unresolvable: inside the window it
    is counted and flags the trial, recording the cause.

    Returns
    -------
    set[int]
        Ids of the rerouted robots.
    """
    rerouted: set[int] = set()
    current: set[frozenset[int]] = set()
    recorder = state.recorder
    counted = recorder.in_window(state.tick)
    for cycle in state.wait_for.cycles():
        key = frozenset(cycle)
        current.add(key)
        fresh = key not in state.seen_cycles or state.tick == recorder.warmup
        if fresh and counted:
            recorder.deadlocks += 1
        choice = _pick_detour(state, router, cycle)
        if choice is None:
            if fresh and counted:
                recorder.unresolved += 1
                reason = f"unresolvable deadlock at tick {state.tick} among robots {sorted(cycle)}"
                if not state.flagged:
                    state.flagged = True
                    state.flag_reason = reason
                logger.warning("Trial flagged: %s", reason)
            elif fresh:
                logger.info(
                    "Unresolvable deadlock in warm-up at tick %d among robots %s", state.tick, sorted(cycle)
                )
            continue
        robot, detour, blocked = choice
        robot.set_route(detour)
        robot.needs_plan = False
        robot.stalled = 0
        state.reservations.release(robot.id)
        rerouted.add(robot.id)
        logger.debug("Tick %d: robot %d detours around cell %d", state.tick, robot.id, blocked)
    state.seen_cycles = current
    return rerouted
