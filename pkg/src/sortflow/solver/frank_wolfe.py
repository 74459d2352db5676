"""Frank-Wolfe solver for the system-optimal robot flow.

The problem routes every forward commodity from ``S`` to its drop-off and
every backward commodity from its drop-off back to ``S``, minimising the
total cost of :mod:`sortflow.delay.cost`.  Each iteration linearises the
objective at the current flow, solves the linear problem exactly by
all-or-nothing shortest paths, and moves toward that point by a 1-D line
search.

Design notes
------------
- The linear subproblem decomposes per commodity, so it is one Dijkstra
  from ``S`` over the forward graph and one over the reversed backward
  graph, whatever the number of drop-offs.
- Equal-cost paths are broken by the smallest arc index while walking the
  shortest-path predecessor sets back from the destination.
- Negative gradient entries are clamped to zero for the subproblem and
  counted in the trace.
- The line search is bounded to the step range that keeps every
  workstation below saturation, and always compares the optimiser's answer
  with both ends of that range, so the objective never increases.
- Convergence follows the change in the linearised objective between
  iterations, scaled by the initial total cost.  Reaching ``max_iter``
  ends the run with ``converged=False`` and a warning.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import dataclass

import networkx as nx
import numpy as np
from scipy.optimize import minimize_scalar

from sortflow.delay.cost import (
    EPS_SATURATION,
    LinkFlow,
    SaturatedWorkstation,
    TimingParams,
    arc_costs,
    conservation_residual,
    cost_gradient,
    total_cost,
)
from sortflow.network.graph import (
    ArcKind,
    Commodity,
    Direction,
    DisconnectedCommodity,
    FloatArray,
    FlowNetwork,
)
from sortflow.network.layout import Demand

logger = logging.getLogger(__name__)

#: Extra margin kept below the saturation limit when bounding the step.
_STEP_MARGIN: float = 10.0 * EPS_SATURATION

# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


class InfeasibleDemand(ValueError):
    """Raised when total loading work exceeds what the workstations can serve.

    Attributes
    ----------
    load:
        Required loading work per time step, ``lambda * E[T_load]``.
    capacity:
        Number of workstations (each serves at most one unit of work).
    """

    def __init__(self, load: float, capacity: float) -> None:
        super().__init__(
            f"demand needs {load:.4f} units of loading work per step; "
            f"workstations provide {capacity:.4f}"
        )
        self.load = load
        self.capacity = capacity


@dataclass(frozen=True)
class SolverConfig:
    """Frank-Wolfe settings.

    Attributes
    ----------
    epsilon:
        Convergence tolerance on successive linearised objectives, relative
        to the initial total cost.
    max_iter:
        Iteration cap.
    line_search_iter:
        Iteration cap of the bounded 1-D minimiser.
    seed:
        Seed handed on to path decomposition.
    """

    epsilon: float = 1e-6
    max_iter: int = 200
    line_search_iter: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon!r}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter!r}")
        if self.line_search_iter < 1:
            raise ValueError(f"line_search_iter must be >= 1, got {self.line_search_iter!r}")


@dataclass(frozen=True)
class TraceRow:
    """One Frank-Wolfe iteration.

    ``tc`` is the total cost after the step, ``tc_linear`` the linearised
    objective at the all-or-nothing point, ``gap`` the duality gap
    ``grad . (f - y)`` before the step and ``clamped`` the number of
    negative gradient entries set to zero.
    """

    iteration: int
    tc: float
    tc_linear: float
    alpha: float
    gap: float
    residual: float
    clamped: int


@dataclass(frozen=True)
class SolveTrace:
    """Per-iteration history and outcome of one solve."""

    rows: tuple[TraceRow, ...]
    converged: bool
    flow: LinkFlow

    @property
    def iterations(self) -> int:
        return len(self.rows)

    @property
    def final_cost(self) -> float:
        return self.rows[-1].tc if self.rows else 0.0


# ---------------------------------------------------------------------------
# All-or-nothing assignment
# ---------------------------------------------------------------------------


def _backtrack(graph: nx.DiGraph, pred: dict[int, list[int]], start: int, goal: int) -> list[int]:
    """Walk predecessor sets from *goal* to *start*, preferring the smallest arc id."""
    path = [goal]
    seen = {goal}
    node = goal
    while node != start:
        options = sorted((graph[p][node]["arc"], p) for p in pred.get(node, []) if p not in seen)
        if not options:
            return _tree_path(pred, start, goal)
        node = options[0][1]
        path.append(node)
        seen.add(node)
    return path


def _tree_path(pred: dict[int, list[int]], start: int, goal: int) -> list[int]:
    path = [goal]
    while path[-1] != start:
        path.append(pred[path[-1]][0])
    return path


def _arc_ids(network: FlowNetwork, nodes: list[int]) -> list[int]:
    return [network.arc_index[(a, b)] for a, b in zip(nodes, nodes[1:])]


def shortest_routes(
    network: FlowNetwork,
    costs: FloatArray,
    direction: Direction,
    workstation: int | None = None,
) -> dict[int, list[int]]:
    """Return the cheapest route (node ids, ``S``/``T`` included) per drop-off.

    Forward routes run ``S -> W -> ... -> D -> T`` and backward routes
    ``T -> D -> ... -> W -> S``.  When *workstation* is given, routes are
    restricted to that workstation.

    Raises
    ------
    DisconnectedCommodity
        If a drop-off has no route under the restriction.
    """
    banned: set[int] = set()
    if workstation is not None:
        kind = ArcKind.LOAD if direction is Direction.FORWARD else ArcKind.SORTER
        for i in network.arcs_of(kind):
            arc = network.arcs[int(i)]
            station = arc.head if kind is ArcKind.LOAD else arc.tail
            if network.nodes[station].ident != workstation:
                banned.add(int(i))

    def weight(_u: int, _v: int, data: dict[str, int]) -> float | None:
        arc = data["arc"]
        return None if arc in banned else float(costs[arc])

    graph = network.routing_graph(direction)
    if direction is Direction.BACKWARD:
        graph = graph.reverse(copy=False)
    pred, _dist = nx.dijkstra_predecessor_and_distance(graph, network.source, weight=weight)

    routes: dict[int, list[int]] = {}
    for d_id in network.dropoff_ids:
        node = network.dropoff_node(d_id)
        if node not in pred:
            raise DisconnectedCommodity(direction, d_id)
        walk = _backtrack(graph, pred, network.source, node)
        if direction is Direction.FORWARD:
            routes[d_id] = walk[::-1] + [network.sink]
        else:
            routes[d_id] = [network.sink] + walk
    return routes


def all_or_nothing(
    network: FlowNetwork,
    costs: FloatArray,
    commodities: Iterable[Commodity] | None = None,
    workstation: int | None = None,
) -> LinkFlow:
    """Route every commodity's whole demand on its cheapest path.

    Parameters
    ----------
    network:
        The flow network.
    costs:
        Non-negative cost per arc.
    commodities:
        Demands to route; defaults to the network's own commodities.
    workstation:
        Restrict all routes to this workstation.

    Returns
    -------
    LinkFlow
        A flow satisfying conservation exactly.

    Raises
    ------
    ValueError
        If *costs* has the wrong length or a negative entry.
    DisconnectedCommodity
        If a commodity has no route.
    """
    if costs.shape != (network.n_arcs,):
        raise ValueError(f"expected {network.n_arcs} arc costs, got shape {costs.shape}")
    if np.any(costs < 0):
        raise ValueError("arc costs must be non-negative")
    wanted = network.commodities if commodities is None else tuple(commodities)
    flows = {Direction.FORWARD: np.zeros(network.n_arcs), Direction.BACKWARD: np.zeros(network.n_arcs)}
    for direction in Direction:
        demands = [c for c in wanted if c.direction is direction and c.demand > 0]
        if not demands:
            continue
        routes = shortest_routes(network, costs, direction, workstation)
        for c in demands:
            flows[direction][_arc_ids(network, routes[c.dropoff])] += c.demand
    return LinkFlow(flows[Direction.FORWARD], flows[Direction.BACKWARD])


# ---------------------------------------------------------------------------
# Line search
# ---------------------------------------------------------------------------


def _step_bounds(network: FlowNetwork, current: LinkFlow, target: LinkFlow, timing: TimingParams) -> tuple[float, float]:
    loads = network.arcs_of(ArcKind.LOAD)
    start = current.total[loads]
    slope = target.total[loads] - start
    cap = (1.0 - _STEP_MARGIN) / timing.t_load
    lo, hi = 0.0, 1.0
    for a, b in zip(start, slope):
        if b > 0:
            hi = min(hi, (cap - a) / b)
        elif b < 0:
            lo = max(lo, (cap - a) / b)
        elif a > cap:
            return 1.0, 0.0
    return lo, hi


def line_search(
    network: FlowNetwork,
    current: LinkFlow,
    target: LinkFlow,
    timing: TimingParams,
    iterations: int = 64,
) -> tuple[float, float]:
    """Minimise total cost along the segment from *current* to *target*.

    The step range is clipped so that every workstation stays below
    saturation; within it a bounded scalar minimiser runs for at most
    *iterations* steps, and the best of its answer, the range ends and
    whichever segment ends are unsaturated wins.

    Returns
    -------
    tuple[float, float]
        ``(alpha, tc)`` with ``alpha`` in ``[0, 1]``.

    Raises
    ------
    SaturatedWorkstation
        If no point of the segment keeps all workstations below saturation.
    """
    if np.array_equal(current.forward, target.forward) and np.array_equal(current.backward, target.backward):
        return 0.0, total_cost(network, current, timing)

    def tc(alpha: float) -> float:
        return total_cost(network, current.toward(target, alpha), timing)

    candidates: dict[float, float] = {}
    failure: SaturatedWorkstation | None = None
    for end in (0.0, 1.0):
        try:
            candidates[end] = tc(end)
        except SaturatedWorkstation as exc:
            failure = failure or exc
    lo, hi = _step_bounds(network, current, target, timing)
    if lo <= hi:
        candidates[lo] = tc(lo)
        candidates[hi] = tc(hi)
        if hi > lo:
            result = minimize_scalar(
                tc, bounds=(lo, hi), method="bounded", options={"maxiter": iterations, "xatol": 1e-10}
            )
            candidates[float(result.x)] = tc(float(result.x))
    if not candidates:
        assert failure is not None
        raise failure
    best = min(candidates, key=lambda a: (candidates[a], a))
    return best, candidates[best]


# ---------------------------------------------------------------------------
# Frank-Wolfe
# ---------------------------------------------------------------------------


def _initial_flow(network: FlowNetwork, timing: TimingParams) -> LinkFlow:
    free = arc_costs(network, LinkFlow.zeros(network), timing)
    flow = all_or_nothing(network, free)
    try:
        total_cost(network, flow, timing)
        return flow
    except SaturatedWorkstation as exc:
        logger.info("Free-flow assignment saturates W%d; starting from an equal split", exc.workstation)
        saturated = exc
    parts = []
    for ws in network.workstation_ids:
        try:
            parts.append(all_or_nothing(network, free, workstation=ws))
        except DisconnectedCommodity:
            logger.debug("W%d cannot serve every drop-off; left out of the split", ws)
    if not parts:
        raise saturated
    share = 1.0 / len(parts)
    return LinkFlow(
        share * np.sum([p.forward for p in parts], axis=0),
        share * np.sum([p.backward for p in parts], axis=0),
    )


def frank_wolfe(
    network: FlowNetwork,
    demand: Demand | None,
    timing: TimingParams,
    config: SolverConfig | None = None,
) -> tuple[LinkFlow, SolveTrace]:
    """Compute an approximately system-optimal link flow.

    Parameters
    ----------
    network:
        The flow network.
    demand:
        Per-drop-off demand; ``None`` keeps the network's own commodities.
    timing:
        Operation times.
    config:
        Solver settings; defaults to :class:`SolverConfig()`.

    Returns
    -------
    tuple[LinkFlow, SolveTrace]
        The final flow and the iteration history.

    Raises
    ------
    InfeasibleDemand
        If ``lambda * E[T_load]`` reaches the number of workstations.
    DisconnectedCommodity
        If a commodity has no route.
    """
    cfg = config or SolverConfig()
    if demand is not None:
        network = network.with_demand(demand)
    lam = sum(network.commodity_demands(Direction.FORWARD).values())
    n_ws = len(network.workstation_ids)
    if lam * timing.t_load >= n_ws * (1.0 - EPS_SATURATION):
        raise InfeasibleDemand(lam * timing.t_load, float(n_ws))

    if lam == 0.0:
        flow = LinkFlow.zeros(network)
        row = TraceRow(1, 0.0, 0.0, 0.0, 0.0, conservation_residual(network, flow), 0)
        return flow, SolveTrace((row,), True, flow)

    flow = _initial_flow(network, timing)
    tc0 = total_cost(network, flow, timing)
    tolerance = cfg.epsilon * tc0
    logger.debug("Initial assignment: TC=%.6f", tc0)

    rows: list[TraceRow] = []
    previous_linear: float | None = None
    converged = False
    for iteration in range(1, cfg.max_iter + 1):
        gradient = cost_gradient(network, flow, timing).gradient
        negative = gradient < 0.0
        clamped = int(np.count_nonzero(negative))
        if clamped:
            logger.warning(
                "Iteration %d: clamped %d negative gradient entries (min %.3e)",
                iteration, clamped, float(gradient.min()),
            )
        costs = np.where(negative, 0.0, gradient)
        target = all_or_nothing(network, costs)
        linear = float(costs @ target.total)
        gap = float(gradient @ (flow.total - target.total))
        alpha, tc = line_search(network, flow, target, timing, cfg.line_search_iter)
        stalled = alpha == 0.0 and np.array_equal(flow.total, target.total)
        flow = flow.toward(target, alpha)
        residual = conservation_residual(network, flow)
        rows.append(TraceRow(iteration, tc, linear, alpha, gap, residual, clamped))
        logger.debug(
            "Iteration %d: TC=%.6f linear=%.6f alpha=%.4f gap=%.3e", iteration, tc, linear, alpha, gap
        )
        if stalled or (previous_linear is not None and abs(linear - previous_linear) < tolerance):
            converged = True
            break
        previous_linear = linear

    if converged:
        logger.info("Frank-Wolfe converged after %d iterations: TC=%.6f", len(rows), rows[-1].tc)
    else:
        logger.warning(
            "Frank-Wolfe stopped at max_iter=%d without converging: TC=%.6f", cfg.max_iter, rows[-1].tc
        )
    return flow, SolveTrace(tuple(rows), converged, flow)
