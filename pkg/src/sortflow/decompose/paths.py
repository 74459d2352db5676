"""Path-flow recovery from link flow, and split tables for online dispatch.

A link flow only says how much traffic uses each arc.  Dispatching robots
needs whole routes: which workstation serves a drop-off and which cells
the robot crosses.  :func:`decompose_flow` recovers a set of paths whose
intensities add up to the link flow, and :func:`build_split_table` turns
them into per-drop-off sampling tables.

Design notes
------------
- Forward and backward classes are decomposed separately, each over its
  own flow vector.
- Walks branch at random in proportion to the remaining arc flow.  When a
  walk comes back to a node it already visited, the loop is erased from
  the path; the loop keeps its flow for later walks.
- Flow below ``1e-12`` on an arc counts as zero.
- Positive flow left once every node is balanced is a circulation.  It is
  cancelled and reported with :class:`ResidualCycleWarning`; the cancelled
  flow is kept on the table so recomposition can still be checked.
- Paths are node-id tuples including ``S`` and ``T``.  Walks that follow
  the same node sequence are merged into one entry.
"""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from collections.abc import Collection, Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import networkx as nx
import numpy as np

from sortflow.delay.cost import LinkFlow
from sortflow.network.graph import Direction, FloatArray, FlowNetwork, IntArray, NodeKind

logger = logging.getLogger(__name__)

#: Arc flow at or below this is treated as zero.
FLOW_FLOOR: float = 1e-12

#: Node imbalance at or below this is treated as balanced.
_EXCESS_TOL: float = 1e-10

# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class StrandedWalk(RuntimeError):
    """Raised when a walk reaches a node with no remaining outflow.

    This means the input flow does not satisfy conservation.

    Attributes
    ----------
    node:
        Node id where the walk got stuck.
    """

    def __init__(self, node: int) -> None:
        super().__init__(f"walk stranded at node {node}: no outgoing flow and not a destination")
        self.node = node


class MissingDirection(LookupError):
    """Raised when a drop-off has no path in a direction it needs.

    Attributes
    ----------
    dropoff:
        Drop-off id.
    direction:
        The direction without paths.
    """

    def __init__(self, dropoff: int, direction: Direction) -> None:
        super().__init__(f"no {direction.value} paths for D{dropoff}")
        self.dropoff = dropoff
        self.direction = direction


class ResidualCycleWarning(UserWarning):
    """Emitted when a circulation is cancelled during decomposition."""


# ---------------------------------------------------------------------------
# Residual graph and walks
# ---------------------------------------------------------------------------


class ResidualGraph:
    """Mutable arc flows with per-node excess (outflow minus inflow).

    Parameters
    ----------
    n_nodes:
        Number of nodes.
    tails, heads:
        Arc endpoints.
    flow:
        Arc flows; copied.
    """

    def __init__(self, n_nodes: int, tails: Sequence[int], heads: Sequence[int], flow: FloatArray) -> None:
        self.n_nodes = n_nodes
        self.tails: IntArray = np.asarray(tails, dtype=np.int64)
        self.heads: IntArray = np.asarray(heads, dtype=np.int64)
        self.flow: FloatArray = np.where(np.asarray(flow, dtype=np.float64) > FLOW_FLOOR, flow, 0.0)
        if not (len(self.tails) == len(self.heads) == len(self.flow)):
            raise ValueError("tails, heads and flow must have equal length")
        if np.any(self.flow < 0):
            raise ValueError("residual flow must be non-negative")
        self._out: list[list[int]] = [[] for _ in range(n_nodes)]
        self._arc_of: dict[tuple[int, int], int] = {}
        for arc, (tail, head) in enumerate(zip(self.tails.tolist(), self.heads.tolist())):
            self._out[tail].append(arc)
            self._arc_of.setdefault((tail, head), arc)
        self.step_limit = 256 * (n_nodes + len(self.flow)) + 16
        self.excess: FloatArray = (
            np.bincount(self.tails, weights=self.flow, minlength=n_nodes)
            - np.bincount(self.heads, weights=self.flow, minlength=n_nodes)
        )

    @classmethod
    def from_network(cls, network: FlowNetwork, flow: FloatArray) -> ResidualGraph:
        return cls(network.n_nodes, network.tails, network.heads, flow)

    def outgoing(self, node: int) -> list[int]:
        """Return arc ids leaving *node* that still carry flow, ascending."""
        return [a for a in self._out[node] if self.flow[a] > 0.0]

    def path_arcs(self, path: Sequence[int]) -> list[int]:
        """Return the arc ids joining consecutive nodes of *path*."""
        return [self._arc_of[(a, b)] for a, b in zip(path, path[1:])]

    def destinations(self) -> set[int]:
        return {int(n) for n in np.flatnonzero(self.excess < -_EXCESS_TOL)}

    def push(self, arcs: Sequence[int], amount: float) -> None:
        """Remove *amount* of flow along the arcs of one path."""
        idx = np.asarray(arcs, dtype=np.int64)
        self.flow[idx] -= amount
        self.flow[self.flow <= FLOW_FLOOR] = 0.0
        if len(idx):
            self.excess[self.tails[idx[0]]] -= amount
            self.excess[self.heads[idx[-1]]] += amount

    def positive_arcs(self) -> IntArray:
        return np.flatnonzero(self.flow > 0.0)


def follow_path(
    residual: ResidualGraph, start: int, rng: np.random.Generator
) -> tuple[list[int], int]:
    """Walk from *start* along flow-carrying arcs until a destination is hit.

    The next arc is drawn with probability proportional to its remaining
    flow.  Destinations are the nodes with negative excess.  Revisited
    nodes are handled by erasing the loop from the path.

    Returns
    -------
    tuple[list[int], int]
        The node sequence (starting at *start*) and the terminal node.

    Raises
    ------
    StrandedWalk
        If a node with no outgoing flow is reached first.
    """
    dests = residual.destinations()
    if not dests:
        raise StrandedWalk(start)
    path = [start]
    position = {start: 0}
    node = start
    for _ in range(residual.step_limit):
        if node in dests:
            return path, node
        arcs = residual.outgoing(node)
        if not arcs:
            raise StrandedWalk(node)
        weights = np.cumsum(residual.flow[arcs])
        pick = int(np.searchsorted(weights, rng.random() * weights[-1], side="right"))
        node = int(residual.heads[arcs[min(pick, len(arcs) - 1)]])
        if node in position:
            for dropped in path[position[node] + 1:]:
                del position[dropped]
            del path[position[node] + 1:]
        else:
            position[node] = len(path)
            path.append(node)
    raise StrandedWalk(node)


# ---------------------------------------------------------------------------
# Path-flow table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathFlow:
    """One recovered path and its intensity.

    Attributes
    ----------
    direction:
        Forward paths run ``S, W, ..., D, T``; backward ``T, D, ..., W, S``.
    dropoff, workstation:
        Station ids read off the path.
    nodes:
        Node ids along the path.
    intensity:
        Flow units per time step carried by the path.
    """

    direction: Direction
    dropoff: int
    workstation: int
    nodes: tuple[int, ...]
    intensity: float

    def __post_init__(self) -> None:
        if not self.intensity > 0:
            raise ValueError(f"path intensity must be > 0, got {self.intensity!r}")
        if len(self.nodes) < 4:
            raise ValueError("a path needs at least S/T, a workstation and a drop-off")

    @property
    def start_node(self) -> int:
        """First node after the drop-off on a backward path, after the workstation on a forward one."""
        return self.nodes[2]


@dataclass(frozen=True)
class PathFlowTable:
    """Recovered paths plus decomposition bookkeeping.

    Attributes
    ----------
    entries:
        Paths, forward first, each class in discovery order.
    pushes:
        Number of flow pushes the decomposition made.
    canceled:
        Circulation flow removed during decomposition (zero when none).
    """

    entries: tuple[PathFlow, ...]
    pushes: int = 0
    canceled: LinkFlow | None = None

    @cached_property
    def _by_dropoff(self) -> dict[tuple[Direction, int], list[PathFlow]]:
        out: dict[tuple[Direction, int], list[PathFlow]] = defaultdict(list)
        for e in self.entries:
            out[(e.direction, e.dropoff)].append(e)
        return dict(out)

    def by_dropoff(self, direction: Direction, dropoff: int) -> list[PathFlow]:
        return list(self._by_dropoff.get((direction, dropoff), []))

    def by_workstation(self, direction: Direction, dropoff: int, workstation: int) -> list[PathFlow]:
        return [e for e in self.by_dropoff(direction, dropoff) if e.workstation == workstation]

    def intensity(self, direction: Direction, dropoff: int) -> float:
        return sum(e.intensity for e in self.by_dropoff(direction, dropoff))

    def __len__(self) -> int:
        return len(self.entries)


def _station_ids(network: FlowNetwork, direction: Direction, nodes: Sequence[int]) -> tuple[int, int]:
    """Return ``(dropoff, workstation)`` of a path, checking its shape."""
    first, second, last2, last = (network.nodes[nodes[i]] for i in (0, 1, -2, -1))
    if direction is Direction.FORWARD:
        shape_ok = (first.kind, second.kind, last2.kind, last.kind) == (
            NodeKind.SOURCE, NodeKind.WORKSTATION, NodeKind.DROPOFF, NodeKind.SINK
        )
        dropoff, workstation = last2, second
    else:
        shape_ok = (first.kind, second.kind, last2.kind, last.kind) == (
            NodeKind.SINK, NodeKind.DROPOFF, NodeKind.WORKSTATION, NodeKind.SOURCE
        )
        dropoff, workstation = second, last2
    if not shape_ok:
        labels = " ".join(network.label(n) for n in nodes)
        raise ValueError(f"{direction.value} path has the wrong shape: {labels}")
    return dropoff.ident, workstation.ident


def _cancel_cycles(residual: ResidualGraph, direction: Direction) -> FloatArray:
    canceled = np.zeros(len(residual.flow))
    while True:
        arcs = residual.positive_arcs()
        if not len(arcs):
            return canceled
        graph = nx.DiGraph()
        for a in arcs:
            graph.add_edge(int(residual.tails[a]), int(residual.heads[a]), arc=int(a))
        try:
            cycle = nx.find_cycle(graph)
        except nx.NetworkXNoCycle:
            logger.warning("Dropping %.3e of acyclic %s residue", float(residual.flow[arcs].sum()), direction.value)
            canceled[arcs] += residual.flow[arcs]
            residual.flow[arcs] = 0.0
            return canceled
        ids = [graph[u][v]["arc"] for u, v in cycle]
        amount = float(residual.flow[ids].min())
        residual.flow[ids] -= amount
        residual.flow[residual.flow <= FLOW_FLOOR] = 0.0
        canceled[ids] += amount
        message = f"cancelled a {direction.value} circulation of {amount:.3e} over {len(ids)} arcs"
        logger.warning(message)
        warnings.warn(message, ResidualCycleWarning, stacklevel=3)


def _decompose_class(
    network: FlowNetwork,
    direction: Direction,
    values: FloatArray,
    rng: np.random.Generator,
) -> tuple[list[PathFlow], int, FloatArray]:
    residual = ResidualGraph.from_network(network, values)
    merged: dict[tuple[int, ...], float] = {}
    pushes = 0
    for start in np.flatnonzero(residual.excess > _EXCESS_TOL):
        start = int(start)
        while residual.excess[start] > _EXCESS_TOL:
            path, end = follow_path(residual, start, rng)
            arcs = residual.path_arcs(path)
            amount = min(
                float(residual.excess[start]),
                float(-residual.excess[end]),
                float(residual.flow[arcs].min()),
            )
            residual.push(arcs, amount)
            pushes += 1
            key = tuple(path)
            merged[key] = merged.get(key, 0.0) + amount
    canceled = _cancel_cycles(residual, direction)

    entries = []
    for nodes, intensity in merged.items():
        dropoff, workstation = _station_ids(network, direction, nodes)
        entries.append(PathFlow(direction, dropoff, workstation, nodes, intensity))
    return entries, pushes, canceled


def decompose_flow(network: FlowNetwork, flow: LinkFlow, rng: np.random.Generator) -> PathFlowTable:
    """Recover a path-flow table whose paths add up to *flow*.

    Parameters
    ----------
    network:
        The flow network *flow* lives on.
    flow:
        A conserving link flow, typically a Frank-Wolfe result.
    rng:
        Random stream for branch choices; a fixed seed gives a fixed table.

    Returns
    -------
    PathFlowTable
        Forward then backward entries; ``pushes`` counts flow pushes and
        ``canceled`` holds any circulation removed on the way.

    Raises
    ------
    StrandedWalk
        If *flow* violates conservation.
    ValueError
        If a recovered path does not run between ``S``/``T`` through a
        workstation and a drop-off.
    """
    entries: list[PathFlow] = []
    pushes = 0
    canceled: dict[Direction, FloatArray] = {}
    for direction, values in ((Direction.FORWARD, flow.forward), (Direction.BACKWARD, flow.backward)):
        found, n, removed = _decompose_class(network, direction, values, rng)
        entries += found
        pushes += n
        canceled[direction] = removed
    bound = 2 * network.n_nodes + network.n_arcs
    if pushes > bound:
        logger.warning("Decomposition used %d pushes, above the %d bound", pushes, bound)
    logger.debug("Decomposed flow into %d paths with %d pushes", len(entries), pushes)
    return PathFlowTable(
        entries=tuple(entries),
        pushes=pushes,
        canceled=LinkFlow(canceled[Direction.FORWARD], canceled[Direction.BACKWARD]),
    )


def recompose(network: FlowNetwork, table: PathFlowTable) -> LinkFlow:
    """Sum path intensities back onto arcs."""
    out = {Direction.FORWARD: np.zeros(network.n_arcs), Direction.BACKWARD: np.zeros(network.n_arcs)}
    for e in table.entries:
        arcs = [network.arc_index[(a, b)] for a, b in zip(e.nodes, e.nodes[1:])]
        out[e.direction][arcs] += e.intensity
    return LinkFlow(out[Direction.FORWARD], out[Direction.BACKWARD])


# ---------------------------------------------------------------------------
# Split tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _AliasTable:
    """Constant-time sampler over a fixed discrete distribution (Vose)."""

    probabilities: FloatArray
    _accept: FloatArray = field(init=False, repr=False)
    _alias: IntArray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.probabilities)
        scaled = self.probabilities * n
        accept = np.ones(n)
        alias = np.arange(n, dtype=np.int64)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s, g = small.pop(), large.pop()
            accept[s] = scaled[s]
            alias[s] = g
            scaled[g] -= 1.0 - scaled[s]
            (small if scaled[g] < 1.0 else large).append(g)
        object.__setattr__(self, "_accept", accept)
        object.__setattr__(self, "_alias", alias)

    def draw(self, rng: np.random.Generator) -> int:
        i = int(rng.integers(len(self._accept)))
        return i if rng.random() < self._accept[i] else int(self._alias[i])


@dataclass(frozen=True, eq=False)
class SplitOptions:
    """The paths open to one (direction, drop-off[, start cell]) and their probabilities."""

    paths: tuple[PathFlow, ...]
    probabilities: FloatArray
    sampler: _AliasTable

    @classmethod
    def of(cls, paths: Sequence[PathFlow]) -> SplitOptions:
        weights = np.array([p.intensity for p in paths])
        probabilities = weights / weights.sum()
        return cls(tuple(paths), probabilities, _AliasTable(probabilities))

    def draw(self, rng: np.random.Generator) -> PathFlow:
        return self.paths[self.sampler.draw(rng)]


class SplitTable:
    """Per-drop-off distributions over (workstation, path) pairs.

    A forward draw for drop-off *d* picks path *r* with probability
    ``f_r / sum f`` over the forward paths to *d*; backward draws work the
    same way and can be narrowed to paths leaving from a given cell node.
    """

    def __init__(self, table: PathFlowTable) -> None:
        grouped: dict[tuple[Direction, int], list[PathFlow]] = defaultdict(list)
        by_start: dict[tuple[int, int], list[PathFlow]] = defaultdict(list)
        for e in table.entries:
            grouped[(e.direction, e.dropoff)].append(e)
            if e.direction is Direction.BACKWARD:
                by_start[(e.dropoff, e.start_node)].append(e)
        self._options = {k: SplitOptions.of(v) for k, v in grouped.items()}
        self._by_start = dict(by_start)
        self._from_node = {k: SplitOptions.of(v) for k, v in by_start.items()}
        self._from_cell: dict[tuple[int, frozenset[int]], SplitOptions | None] = {}

    def covers(self, direction: Direction, dropoff: int) -> bool:
        return (direction, dropoff) in self._options

    def options(self, direction: Direction, dropoff: int) -> SplitOptions:
        """Return the distribution for *dropoff* in *direction*.

        Raises
        ------
        MissingDirection
            If the table has no such paths.
        """
        try:
            return self._options[(direction, dropoff)]
        except KeyError:
            raise MissingDirection(dropoff, direction) from None

    def draw(
        self,
        direction: Direction,
        dropoff: int,
        rng: np.random.Generator,
        start_node: int | Collection[int] | None = None,
    ) -> PathFlow:
        """Draw one path.

        Backward draws prefer paths leaving from *start_node*, or from any
        of several nodes (the headings of one cell) when a collection is
        given.
        """
        if direction is Direction.BACKWARD and start_node is not None:
            narrowed = self._narrowed(dropoff, start_node)
            if narrowed is not None:
                return narrowed.draw(rng)
        return self.options(direction, dropoff).draw(rng)

    def _narrowed(self, dropoff: int, start: int | Collection[int]) -> SplitOptions | None:
        if isinstance(start, int):
            return self._from_node.get((dropoff, start))
        key = (dropoff, frozenset(start))
        if key not in self._from_cell:
            paths = [p for node in sorted(key[1]) for p in self._by_start.get((dropoff, node), [])]
            self._from_cell[key] = SplitOptions.of(paths) if paths else None
        return self._from_cell[key]

    def return_nodes(self, dropoff: int) -> list[int]:
        """Cell nodes that backward paths of *dropoff* leave from."""
        return sorted(node for d, node in self._from_node if d == dropoff)


def build_split_table(pathflows: PathFlowTable, required: Iterable[int] | None = None) -> SplitTable:
    """Build the split table of *pathflows*.

    Parameters
    ----------
    pathflows:
        A decomposition result.
    required:
        Drop-offs that must have paths in both directions (those with
        positive demand).  Defaults to every drop-off seen in the table.

    Raises
    ------
    MissingDirection
        If a required drop-off lacks paths in either direction.
    """
    split = SplitTable(pathflows)
    wanted = sorted({e.dropoff for e in pathflows.entries} if required is None else set(required))
    for d in wanted:
        for direction in Direction:
            if not split.covers(direction, d):
                raise MissingDirection(d, direction)
    return split
