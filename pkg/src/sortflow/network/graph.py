"""Directed flow network with heading-expanded cell nodes.

Every ordinary cell expands into one node per allowed heading.  Moving
between cells keeps the heading; turning in place is an in-cell ``TURN``
arc.  Workstations, drop-offs, a source ``S`` and a sink ``T`` complete the
graph, so a route's cost is a plain sum of arc costs.

Arc kinds
---------
===========  ==============================  ==========  ===========
Kind         Connects                        Direction   Free cost
===========  ==============================  ==========  ===========
``MOVE``     cell-heading -> cell-heading    both        T1
``TURN``     heading -> heading, same cell   both        T2
``LOAD``     S -> workstation                forward     E[T_load]
``SORTER``   workstation -> S                backward    0
``DEPART``   workstation -> exit cell        forward     T1
``ENTRY``    entrance cell -> workstation    backward    T1
``DROP``     cell -> drop-off                forward     E[T_drop]
``REJOIN``   drop-off -> cell                backward    0
``EXIT``     drop-off <-> T                  both        0
===========  ==============================  ==========  ===========

Design notes
------------
- Node order is fixed: ``S``, ``T``, workstations by id, drop-offs by id,
  then cell-heading nodes in row-major cell order and N, E, S, W heading
  order.  Arcs are emitted node by node in that order, so flow vectors
  are reproducible across runs.
- Forward routing only sees forward arcs and backward routing only
  backward ones; a forward path therefore cannot pass through a drop-off,
  a workstation or ``S``/``T`` mid-route.
- :class:`FlowNetwork` is immutable.  Derived structures (routing graphs,
  incidence and cell aggregation matrices) are computed lazily once.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import networkx as nx
import numpy as np
import numpy.typing as npt
import scipy.sparse as sp

from sortflow.network.layout import HEADING_ORDER, Demand, Heading, Layout

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

# ---------------------------------------------------------------------------
# Node / arc types
# ---------------------------------------------------------------------------


class NodeKind(str, Enum):
    """What a flow-network node stands for."""

    SOURCE = "source"
    SINK = "sink"
    WORKSTATION = "workstation"
    DROPOFF = "dropoff"
    CELL = "cell"


class ArcKind(str, Enum):
    """Physical meaning of an arc; selects its cost function."""

    MOVE = "move"
    TURN = "turn"
    LOAD = "load"
    SORTER = "sorter"
    DEPART = "depart"
    ENTRY = "entry"
    DROP = "drop"
    REJOIN = "rejoin"
    EXIT = "exit"


class Direction(str, Enum):
    """Commodity class: loaded trips or empty returns."""

    FORWARD = "forward"
    BACKWARD = "backward"


#: Arc kinds usable by forward (loaded) routes.
FORWARD_KINDS: frozenset[ArcKind] = frozenset(
    {ArcKind.LOAD, ArcKind.DEPART, ArcKind.MOVE, ArcKind.TURN, ArcKind.DROP, ArcKind.EXIT}
)

#: Arc kinds usable by backward (empty) routes.
BACKWARD_KINDS: frozenset[ArcKind] = frozenset(
    {ArcKind.EXIT, ArcKind.REJOIN, ArcKind.MOVE, ArcKind.TURN, ArcKind.ENTRY, ArcKind.SORTER}
)

#: Arc kinds that bring a robot into a cell from elsewhere.
ARRIVAL_KINDS: frozenset[ArcKind] = frozenset({ArcKind.MOVE, ArcKind.DEPART})


@dataclass(frozen=True)
class Node:
    """A flow-network node.

    ``ident`` is the station id for workstation/drop-off nodes and the
    row-major cell index for cell nodes; ``heading`` is set only for cells.
    """

    kind: NodeKind
    ident: int = 0
    heading: Heading | None = None

    def label(self, cols: int) -> str:
        """Return the file label: ``S``, ``T``, ``W3``, ``D12`` or ``r4c7E``."""
        match self.kind:
            case NodeKind.SOURCE:
                return "S"
            case NodeKind.SINK:
                return "T"
            case NodeKind.WORKSTATION:
                return f"W{self.ident}"
            case NodeKind.DROPOFF:
                return f"D{self.ident}"
            case _:
                r, c = divmod(self.ident, cols)
                assert self.heading is not None
                return f"r{r}c{c}{self.heading.value}"


@dataclass(frozen=True)
class Arc:
    """A directed arc between node indices."""

    tail: int
    head: int
    kind: ArcKind


@dataclass(frozen=True)
class Commodity:
    """One demand stream: all parcels for (or robots returning from) a drop-off."""

    direction: Direction
    dropoff: int
    demand: float


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class DisconnectedCommodity(RuntimeError):
    """Raised when a commodity's origin cannot reach its destination.

    Attributes
    ----------
    direction:
        The commodity class that is cut off.
    dropoff:
        Drop-off id of the commodity.
    """

    def __init__(self, direction: Direction, dropoff: int) -> None:
        super().__init__(f"{direction.value} commodity for D{dropoff} has no route")
        self.direction = direction
        self.dropoff = dropoff


# ---------------------------------------------------------------------------
# Cell aggregation structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CellIncidence:
    """Sparse maps from arc flows to per-cell and per-approach aggregates.

    All matrices have one column per arc.  ``arrival``, ``turn`` and
    ``drop`` have one row per cell index; ``approach`` has one row per
    (cell, tail location) pair feeding that cell.

    Attributes
    ----------
    n_cells:
        Number of cell rows (``rows * cols`` for layout-built networks).
    arrival, turn, drop:
        ``(n_cells, n_arcs)`` 0/1 matrices selecting arrival, turn and
        forward-drop arcs of each cell.
    approach:
        ``(n_groups, n_arcs)`` 0/1 matrix; row *g* sums the arrival arcs of
        approach *g*.
    group_cell:
        Cell index each approach feeds.
    group_source:
        Cell index the approach comes from, ``-1`` for a workstation.
    group_of_arc:
        Approach row for each arrival arc, ``-1`` for other arcs.
    downstream:
        For each cell index, the cells reachable from it by one move.
    """

    n_cells: int
    arrival: sp.csr_matrix
    turn: sp.csr_matrix
    drop: sp.csr_matrix
    approach: sp.csr_matrix
    group_cell: IntArray
    group_source: IntArray
    group_of_arc: IntArray
    downstream: tuple[tuple[int, ...], ...]

    @cached_property
    def group_to_cell(self) -> sp.csr_matrix:
        """``(n_cells, n_groups)`` map summing approach values per cell."""
        n_groups = len(self.group_cell)
        return sp.csr_matrix(
            (np.ones(n_groups), (self.group_cell, np.arange(n_groups))),
            shape=(self.n_cells, n_groups),
        )

    @cached_property
    def source_to_cell(self) -> sp.csr_matrix:
        """``(n_cells, n_groups)`` map summing approach values per *source* cell."""
        mask = self.group_source >= 0
        idx = np.flatnonzero(mask)
        return sp.csr_matrix(
            (np.ones(len(idx)), (self.group_source[idx], idx)),
            shape=(self.n_cells, len(self.group_cell)),
        )


def _selector(rows: Sequence[int], cols: Sequence[int], shape: tuple[int, int]) -> sp.csr_matrix:
    idx = (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))
    return sp.csr_matrix((np.ones(len(rows)), idx), shape=shape)


# ---------------------------------------------------------------------------
# FlowNetwork
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FlowNetwork:
    """The directed flow network of a layout plus its commodities.

    Attributes
    ----------
    nodes:
        All nodes; index in this tuple is the node id used by arcs.
    arcs:
        All arcs; index in this tuple is the arc id used by flow vectors.
    commodities:
        Forward then backward commodities, each ordered by drop-off id.
    rows, cols:
        Grid dimensions for label rendering and heatmaps (``0`` for
        networks assembled by hand without a layout).
    """

    nodes: tuple[Node, ...]
    arcs: tuple[Arc, ...]
    commodities: tuple[Commodity, ...] = ()
    rows: int = 0
    cols: int = 0

    def __post_init__(self) -> None:
        n = len(self.nodes)
        for a in self.arcs:
            if not (0 <= a.tail < n and 0 <= a.head < n):
                raise ValueError(f"arc {a} references a node outside 0..{n - 1}")
        if len(set(self.nodes)) != n:
            raise ValueError("duplicate nodes in flow network")

    # -- sizes and lookups --------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    @cached_property
    def node_index(self) -> dict[Node, int]:
        return {node: i for i, node in enumerate(self.nodes)}

    @cached_property
    def arc_index(self) -> dict[tuple[int, int], int]:
        """Map ``(tail, head)`` to arc id (arcs are unique per node pair)."""
        return {(a.tail, a.head): i for i, a in enumerate(self.arcs)}

    @property
    def source(self) -> int:
        return self.node_index[Node(NodeKind.SOURCE)]

    @property
    def sink(self) -> int:
        return self.node_index[Node(NodeKind.SINK)]

    def workstation_node(self, ws_id: int) -> int:
        return self.node_index[Node(NodeKind.WORKSTATION, ws_id)]

    def dropoff_node(self, d_id: int) -> int:
        return self.node_index[Node(NodeKind.DROPOFF, d_id)]

    def cell_node(self, cell: int, heading: Heading) -> int | None:
        """Return the node of *cell* with *heading*, or ``None`` if not allowed."""
        return self.node_index.get(Node(NodeKind.CELL, cell, heading))

    @cached_property
    def workstation_ids(self) -> list[int]:
        return sorted(n.ident for n in self.nodes if n.kind is NodeKind.WORKSTATION)

    @cached_property
    def dropoff_ids(self) -> list[int]:
        return sorted(n.ident for n in self.nodes if n.kind is NodeKind.DROPOFF)

    def label(self, node: int) -> str:
        """Return the file label of node *node*."""
        return self.nodes[node].label(max(self.cols, 1))

    @cached_property
    def label_index(self) -> dict[str, int]:
        return {self.label(i): i for i in range(self.n_nodes)}

    # -- arc attribute arrays -----------------------------------------------

    @cached_property
    def tails(self) -> IntArray:
        return np.array([a.tail for a in self.arcs], dtype=np.int64)

    @cached_property
    def heads(self) -> IntArray:
        return np.array([a.head for a in self.arcs], dtype=np.int64)

    def arcs_of(self, *kinds: ArcKind) -> IntArray:
        """Return the ids of arcs whose kind is one of *kinds*, ascending."""
        wanted = set(kinds)
        return np.array([i for i, a in enumerate(self.arcs) if a.kind in wanted], dtype=np.int64)

    @cached_property
    def load_arcs(self) -> dict[int, int]:
        """Map workstation id to the id of its ``S -> W`` load arc."""
        return {self.nodes[a.head].ident: i for i, a in enumerate(self.arcs) if a.kind is ArcKind.LOAD}

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Node-arc incidence: ``+1`` at the head, ``-1`` at the tail."""
        m = self.n_arcs
        rows = np.concatenate([self.heads, self.tails])
        cols = np.concatenate([np.arange(m), np.arange(m)])
        vals = np.concatenate([np.ones(m), -np.ones(m)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_nodes, m))

    # -- routing graphs -----------------------------------------------------

    def routing_graph(self, direction: Direction) -> nx.DiGraph:
        """Return the direction-filtered routing graph (edges carry ``arc`` ids)."""
        return self._forward_graph if direction is Direction.FORWARD else self._backward_graph

    @cached_property
    def _forward_graph(self) -> nx.DiGraph:
        return self._filtered_graph(FORWARD_KINDS, Direction.FORWARD)

    @cached_property
    def _backward_graph(self) -> nx.DiGraph:
        return self._filtered_graph(BACKWARD_KINDS, Direction.BACKWARD)

    def _filtered_graph(self, kinds: frozenset[ArcKind], direction: Direction) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(range(self.n_nodes))
        for i, a in enumerate(self.arcs):
            if a.kind not in kinds:
                continue
            # EXIT runs D -> T forward and T -> D backward.
            if a.kind is ArcKind.EXIT:
                into_sink = self.nodes[a.head].kind is NodeKind.SINK
                if into_sink != (direction is Direction.FORWARD):
                    continue
            graph.add_edge(a.tail, a.head, arc=i)
        return graph

    # -- cell aggregation ---------------------------------------------------

    def cell_of(self, node: int) -> int | None:
        """Return the cell index of a cell node, else ``None``."""
        n = self.nodes[node]
        return n.ident if n.kind is NodeKind.CELL else None

    @cached_property
    def cell_incidence(self) -> CellIncidence:
        """Build the sparse cell/approach aggregation maps."""
        cell_ids = [n.ident for n in self.nodes if n.kind is NodeKind.CELL]
        n_cells = self.rows * self.cols if self.rows else (max(cell_ids) + 1 if cell_ids else 0)
        m = self.n_arcs

        arr_r: list[int] = []
        arr_c: list[int] = []
        turn_r: list[int] = []
        turn_c: list[int] = []
        drop_r: list[int] = []
        drop_c: list[int] = []
        groups: dict[tuple[int, int], int] = {}
        group_of_arc = np.full(m, -1, dtype=np.int64)
        downstream: list[set[int]] = [set() for _ in range(n_cells)]

        for i, a in enumerate(self.arcs):
            tail_cell = self.cell_of(a.tail)
            head_cell = self.cell_of(a.head)
            if a.kind in ARRIVAL_KINDS and head_cell is not None:
                arr_r.append(head_cell)
                arr_c.append(i)
                src = tail_cell if tail_cell is not None else -1 - self.nodes[a.tail].ident
                key = (head_cell, src)
                if key not in groups:
                    groups[key] = len(groups)
                group_of_arc[i] = groups[key]
                if a.kind is ArcKind.MOVE and tail_cell is not None:
                    downstream[tail_cell].add(head_cell)
            elif a.kind is ArcKind.TURN and tail_cell is not None:
                turn_r.append(tail_cell)
                turn_c.append(i)
            elif a.kind is ArcKind.DROP and tail_cell is not None:
                drop_r.append(tail_cell)
                drop_c.append(i)

        keys = sorted(groups, key=groups.__getitem__)
        group_cell = np.array([k[0] for k in keys], dtype=np.int64)
        group_source = np.array([k[1] if k[1] >= 0 else -1 for k in keys], dtype=np.int64)
        arr_groups = [int(group_of_arc[i]) for i in arr_c]
        return CellIncidence(
            n_cells=n_cells,
            arrival=_selector(arr_r, arr_c, (n_cells, m)),
            turn=_selector(turn_r, turn_c, (n_cells, m)),
            drop=_selector(drop_r, drop_c, (n_cells, m)),
            approach=_selector(arr_groups, arr_c, (len(keys), m)),
            group_cell=group_cell,
            group_source=group_source,
            group_of_arc=group_of_arc,
            downstream=tuple(tuple(sorted(s)) for s in downstream),
        )

    # -- demand helpers -----------------------------------------------------

    def commodity_demands(self, direction: Direction) -> dict[int, float]:
        """Return ``{dropoff_id: demand}`` for one commodity class."""
        return {c.dropoff: c.demand for c in self.commodities if c.direction is direction}

    def expected_imbalance(self, direction: Direction) -> FloatArray:
        """Return the node imbalance (inflow - outflow) a feasible flow must show."""
        out = np.zeros(self.n_nodes)
        total = sum(self.commodity_demands(direction).values())
        if direction is Direction.FORWARD:
            out[self.source] -= total
            out[self.sink] += total
        else:
            out[self.sink] -= total
            out[self.source] += total
        return out

    def with_demand(self, demand: Demand) -> FlowNetwork:
        """Return a copy of this network carrying *demand* instead."""
        return FlowNetwork(
            nodes=self.nodes,
            arcs=self.arcs,
            commodities=_commodities(self.dropoff_ids, demand),
            rows=self.rows,
            cols=self.cols,
        )


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _commodities(dropoff_ids: Iterable[int], demand: Demand) -> tuple[Commodity, ...]:
    ids = list(dropoff_ids)
    forward = [Commodity(Direction.FORWARD, d, demand.of(d)) for d in ids]
    backward = [Commodity(Direction.BACKWARD, d, demand.of(d)) for d in ids]
    return tuple(forward + backward)


def build_flow_network(layout: Layout, demand: Demand) -> FlowNetwork:
    """Build the heading-expanded flow network of *layout* with *demand*.

    Parameters
    ----------
    layout:
        A validated layout.
    demand:
        Must name every drop-off of *layout*.

    Returns
    -------
    FlowNetwork
        Nodes and arcs in the deterministic order described in the module
        docstring, with one forward and one backward commodity per drop-off.

    Raises
    ------
    ValueError
        If *demand* misses a drop-off or names an unknown one.
    DisconnectedCommodity
        If a drop-off cannot be reached from ``S`` (forward) or cannot reach
        ``S`` (backward).
    """
    missing = set(layout.dropoff_ids) - set(demand.per_dropoff)
    unknown = set(demand.per_dropoff) - set(layout.dropoff_ids)
    if missing or unknown:
        raise ValueError(
            f"demand must cover exactly the layout drop-offs; missing {sorted(missing)}, "
            f"unknown {sorted(unknown)}"
        )

    nodes: list[Node] = [Node(NodeKind.SOURCE), Node(NodeKind.SINK)]
    nodes += [Node(NodeKind.WORKSTATION, w) for w in layout.workstation_ids]
    nodes += [Node(NodeKind.DROPOFF, d) for d in layout.dropoff_ids]
    for r, c, _ in layout.iter_cells():
        for h in HEADING_ORDER:
            if h in layout.allowed(r, c):
                nodes.append(Node(NodeKind.CELL, layout.index(r, c), h))
    index = {node: i for i, node in enumerate(nodes)}

    def cell_node(r: int, c: int, h: Heading) -> int:
        return index[Node(NodeKind.CELL, layout.index(r, c), h)]

    # Station adjacency, keyed by cell position.
    entry_of: dict[tuple[int, int, Heading], int] = {}
    for w in layout.workstation_ids:
        for r, c, h in layout.entrance_neighbors(w):
            entry_of[(r, c, h)] = w
    drops_of: dict[tuple[int, int], list[int]] = {}
    for d in layout.dropoff_ids:
        for pos in layout.drop_neighbors(d):
            drops_of.setdefault(pos, []).append(d)

    arcs: list[Arc] = []
    s, t = index[Node(NodeKind.SOURCE)], index[Node(NodeKind.SINK)]
    for i, node in enumerate(nodes):
        match node.kind:
            case NodeKind.SOURCE:
                arcs += [Arc(s, index[Node(NodeKind.WORKSTATION, w)], ArcKind.LOAD)
                         for w in layout.workstation_ids]
            case NodeKind.SINK:
                arcs += [Arc(t, index[Node(NodeKind.DROPOFF, d)], ArcKind.EXIT)
                         for d in layout.dropoff_ids]
            case NodeKind.WORKSTATION:
                arcs.append(Arc(i, s, ArcKind.SORTER))
                heads = sorted(cell_node(r, c, h) for r, c, h in layout.exit_neighbors(node.ident))
                arcs += [Arc(i, j, ArcKind.DEPART) for j in heads]
            case NodeKind.DROPOFF:
                arcs.append(Arc(i, t, ArcKind.EXIT))
                heads = sorted(
                    cell_node(r, c, h)
                    for r, c in layout.drop_neighbors(node.ident)
                    for h in layout.allowed(r, c)
                )
                arcs += [Arc(i, j, ArcKind.REJOIN) for j in heads]
            case NodeKind.CELL:
                assert node.heading is not None
                r, c = layout.coords(node.ident)
                h = node.heading
                nxt = layout.neighbor(r, c, h)
                if nxt is not None and h in layout.allowed(*nxt):
                    arcs.append(Arc(i, cell_node(nxt[0], nxt[1], h), ArcKind.MOVE))
                for other in HEADING_ORDER:
                    if other != h and other in layout.allowed(r, c):
                        arcs.append(Arc(i, cell_node(r, c, other), ArcKind.TURN))
                for d in sorted(drops_of.get((r, c), [])):
                    arcs.append(Arc(i, index[Node(NodeKind.DROPOFF, d)], ArcKind.DROP))
                if (r, c, h) in entry_of:
                    arcs.append(Arc(i, index[Node(NodeKind.WORKSTATION, entry_of[(r, c, h)])],
                                    ArcKind.ENTRY))

    network = FlowNetwork(
        nodes=tuple(nodes),
        arcs=tuple(arcs),
        commodities=_commodities(layout.dropoff_ids, demand),
        rows=layout.rows,
        cols=layout.cols,
    )
    _check_connected(network)
    logger.debug("Built flow network: %d nodes, %d arcs", network.n_nodes, network.n_arcs)
    return network


def _reachable(graph: nx.DiGraph, start: int) -> set[int]:
    return set(nx.descendants(graph, start)) | {start}


def _check_connected(network: FlowNetwork) -> None:
    forward = _reachable(network.routing_graph(Direction.FORWARD), network.source)
    backward = _reachable(network.routing_graph(Direction.BACKWARD).reverse(copy=False), network.source)
    for d in network.dropoff_ids:
        node = network.dropoff_node(d)
        if node not in forward:
            raise DisconnectedCommodity(Direction.FORWARD, d)
        if node not in backward:
            raise DisconnectedCommodity(Direction.BACKWARD, d)
