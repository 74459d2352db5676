"""Tests for sortflow.network.graph.

Covers:
    - Node and arc counts and the fixed node order of a small corridor floor.
    - Node labels and the label index.
    - Arc kinds per node: move, turn, depart, entry, drop, rejoin, exit.
    - Direction-filtered routing graphs, EXIT arcs in particular.
    - Cell aggregation maps (arrival, turn, drop, approach groups).
    - Demand validation and DisconnectedCommodity for a floor without a
      return route.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from sortflow.network.graph import (
    ArcKind,
    Direction,
    DisconnectedCommodity,
    FlowNetwork,
    NodeKind,
    build_flow_network,
)
from sortflow.network.layout import Demand, Heading, Layout, parse_layout

# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

_FIXTURES = Path(__file__).parent.parent / "integration" / "fixtures"


def _corridor() -> Layout:
    return parse_layout((_FIXTURES / "corridor.txt").read_text(encoding="utf-8"))


def _make_network(lam: float = 0.1) -> FlowNetwork:
    layout = _corridor()
    return build_flow_network(layout, Demand.uniform(layout.dropoff_ids, lam))


def _arc(network: FlowNetwork, tail: str, head: str) -> int:
    index = network.label_index
    return network.arc_index[(index[tail], index[head])]


# ---------------------------------------------------------------------------
# Structure
# ---------------------------------------------------------------------------


class TestStructure:
    def test_sizes(self) -> None:
        network = _make_network()
        assert network.n_nodes == 22
        assert network.n_arcs == 28

    def test_node_order(self) -> None:
        network = _make_network()
        kinds = [n.kind for n in network.nodes[:4]]
        assert kinds == [NodeKind.SOURCE, NodeKind.SINK, NodeKind.WORKSTATION, NodeKind.DROPOFF]
        assert (network.source, network.sink) == (0, 1)
        assert network.workstation_node(1) == 2
        assert network.dropoff_node(1) == 3
        assert network.label(4) == "r0c1E"

    def test_labels_round_trip_through_index(self) -> None:
        network = _make_network()
        for i in range(network.n_nodes):
            assert network.label_index[network.label(i)] == i

    def test_cell_nodes_follow_allowed_headings(self) -> None:
        network = _make_network()
        corner = 3 * 6 + 0
        assert network.cell_node(corner, Heading.N) is not None
        assert network.cell_node(corner, Heading.W) is not None
        assert network.cell_node(corner, Heading.E) is None

    def test_cell_of(self) -> None:
        network = _make_network()
        assert network.cell_of(network.label_index["r3c5W"]) == 23
        assert network.cell_of(network.source) is None

    @pytest.mark.parametrize(
        ("tail", "head", "kind"),
        [
            ("S", "W1", ArcKind.LOAD),
            ("W1", "S", ArcKind.SORTER),
            ("W1", "r0c1E", ArcKind.DEPART),
            ("r0c1E", "r0c2E", ArcKind.MOVE),
            ("r0c3E", "D1", ArcKind.DROP),
            ("D1", "T", ArcKind.EXIT),
            ("T", "D1", ArcKind.EXIT),
            ("D1", "r0c3E", ArcKind.REJOIN),
            ("r0c5E", "r0c5S", ArcKind.TURN),
            ("r0c5S", "r0c5E", ArcKind.TURN),
            ("r1c0N", "W1", ArcKind.ENTRY),
        ],
    )
    def test_arc_kinds(self, tail: str, head: str, kind: ArcKind) -> None:
        network = _make_network()
        assert network.arcs[_arc(network, tail, head)].kind is kind

    def test_heading_is_kept_across_moves(self) -> None:
        network = _make_network()
        index = network.label_index
        # r3c1W moves into the corner's W node, never straight into its N node.
        assert (index["r3c1W"], index["r3c0W"]) in network.arc_index
        assert (index["r3c1W"], index["r3c0N"]) not in network.arc_index

    def test_load_arcs(self) -> None:
        network = _make_network()
        assert network.load_arcs == {1: _arc(network, "S", "W1")}
        assert list(network.arcs_of(ArcKind.LOAD)) == [network.load_arcs[1]]

    def test_incidence_columns_sum_to_zero(self) -> None:
        network = _make_network()
        sums = np.asarray(network.incidence.sum(axis=0)).ravel()
        assert np.all(sums == 0.0)

    def test_arcs_must_reference_known_nodes(self) -> None:
        network = _make_network()
        bad = network.arcs + (type(network.arcs[0])(0, 99, ArcKind.MOVE),)
        with pytest.raises(ValueError, match="outside"):
            FlowNetwork(network.nodes, bad)


# ---------------------------------------------------------------------------
# Routing graphs
# ---------------------------------------------------------------------------


class TestRoutingGraphs:
    def test_forward_graph_kinds(self) -> None:
        network = _make_network()
        graph = network.routing_graph(Direction.FORWARD)
        kinds = {network.arcs[d["arc"]].kind for _, _, d in graph.edges(data=True)}
        assert ArcKind.REJOIN not in kinds
        assert ArcKind.ENTRY not in kinds
        assert ArcKind.SORTER not in kinds
        assert graph.has_edge(network.dropoff_node(1), network.sink)
        assert not graph.has_edge(network.sink, network.dropoff_node(1))

    def test_backward_graph_kinds(self) -> None:
        network = _make_network()
        graph = network.routing_graph(Direction.BACKWARD)
        kinds = {network.arcs[d["arc"]].kind for _, _, d in graph.edges(data=True)}
        assert ArcKind.LOAD not in kinds
        assert ArcKind.DEPART not in kinds
        assert ArcKind.DROP not in kinds
        assert graph.has_edge(network.sink, network.dropoff_node(1))
        assert not graph.has_edge(network.dropoff_node(1), network.sink)


# ---------------------------------------------------------------------------
# Cell aggregation
# ---------------------------------------------------------------------------


class TestCellIncidence:
    def test_shapes(self) -> None:
        network = _make_network()
        inc = network.cell_incidence
        assert inc.n_cells == 24
        assert inc.arrival.shape == (24, network.n_arcs)
        assert inc.turn.shape == (24, network.n_arcs)

    def test_drop_cell_selects_drop_arc(self) -> None:
        network = _make_network()
        inc = network.cell_incidence
        drop = _arc(network, "r0c3E", "D1")
        assert inc.drop[3, drop] == 1.0
        assert inc.drop.sum() == 1.0

    def test_turn_cells(self) -> None:
        network = _make_network()
        turns = np.asarray(network.cell_incidence.turn.sum(axis=1)).ravel()
        # Both turn arcs of each two-heading cell.
        assert turns[5] == 2.0
        assert turns[23] == 2.0
        assert turns[18] == 2.0
        assert turns.sum() == 6.0

    def test_workstation_approach_group(self) -> None:
        network = _make_network()
        inc = network.cell_incidence
        depart = _arc(network, "W1", "r0c1E")
        group = inc.group_of_arc[depart]
        assert group >= 0
        assert inc.group_cell[group] == 1
        assert inc.group_source[group] == -1

    def test_downstream_cells(self) -> None:
        network = _make_network()
        assert network.cell_incidence.downstream[1] == (2,)
        assert network.cell_incidence.downstream[3 * 6 + 0] == (12,)


# ---------------------------------------------------------------------------
# Demand and connectivity
# ---------------------------------------------------------------------------


class TestDemandAndConnectivity:
    def test_commodities(self) -> None:
        network = _make_network(0.1)
        assert network.commodity_demands(Direction.FORWARD) == {1: pytest.approx(0.1)}
        assert network.commodity_demands(Direction.BACKWARD) == {1: pytest.approx(0.1)}

    def test_expected_imbalance(self) -> None:
        network = _make_network(0.1)
        forward = network.expected_imbalance(Direction.FORWARD)
        assert forward[network.source] == pytest.approx(-0.1)
        assert forward[network.sink] == pytest.approx(0.1)

    def test_with_demand_replaces_commodities(self) -> None:
        network = _make_network(0.1)
        other = network.with_demand(Demand({1: 0.2}))
        assert other.commodity_demands(Direction.FORWARD) == {1: pytest.approx(0.2)}
        assert other.arcs is network.arcs

    def test_demand_must_cover_layout(self) -> None:
        with pytest.raises(ValueError, match="missing"):
            build_flow_network(_corridor(), Demand({}))

    def test_demand_must_not_name_unknown_dropoffs(self) -> None:
        with pytest.raises(ValueError, match="unknown"):
            build_flow_network(_corridor(), Demand({1: 0.1, 2: 0.1}))

    def test_missing_return_lane_is_disconnected(self) -> None:
        text = (
            "4 6\n"
            "W1 E  E  E  E  ES\n"
            "N  .  .  D1 .  S\n"
            "N  .  .  .  .  S\n"
            "N  W  W  W  W  SW\n"
        )
        layout = parse_layout(text)
        with pytest.raises(DisconnectedCommodity) as exc_info:
            build_flow_network(layout, Demand({1: 0.1}))
        assert exc_info.value.direction is Direction.BACKWARD
        assert exc_info.value.dropoff == 1
