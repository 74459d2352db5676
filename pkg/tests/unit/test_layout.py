"""Tests for sortflow.network.layout and sortflow.network.generator.

Covers:
    - Parsing the layout grammar: header, comments, station and heading tokens.
    - Every layout invariant: heading count, opposite headings, station ids,
      entrance/exit neighbours of workstations, drop-off neighbours.
    - Syntax errors carry the position of the offending token.
    - serialize_layout output parses back to an equal layout.
    - Demand helpers: uniform spread, CSV parsing and its errors.
    - The standard layout generator: determinism, placement rules, and
      PlacementInfeasible for requests that cannot fit.
"""

from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from sortflow.network.generator import PlacementInfeasible, generate_standard_layout
from sortflow.network.graph import build_flow_network
from sortflow.network.layout import (
    Demand,
    DropOff,
    Heading,
    InvariantViolation,
    LayoutSyntaxError,
    Ordinary,
    UnreachableElement,
    Void,
    Workstation,
    parse_demand,
    parse_layout,
    serialize_demand,
    serialize_layout,
)

# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

_FIXTURES = Path(__file__).parent.parent / "integration" / "fixtures"


def _corridor_text() -> str:
    return (_FIXTURES / "corridor.txt").read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# Headings
# ---------------------------------------------------------------------------


class TestHeading:
    @pytest.mark.parametrize(
        ("heading", "delta", "opposite"),
        [
            (Heading.N, (-1, 0), Heading.S),
            (Heading.E, (0, 1), Heading.W),
            (Heading.S, (1, 0), Heading.N),
            (Heading.W, (0, -1), Heading.E),
        ],
    )
    def test_delta_and_opposite(self, heading: Heading, delta: tuple[int, int], opposite: Heading) -> None:
        assert heading.delta == delta
        assert heading.opposite is opposite


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class TestParseLayout:
    def test_corridor_shape_and_stations(self) -> None:
        layout = parse_layout(_corridor_text())
        assert (layout.rows, layout.cols) == (4, 6)
        assert layout.workstation_ids == [1]
        assert layout.dropoff_ids == [1]
        assert layout.workstation_cell(1) == (0, 0)
        assert layout.dropoff_cell(1) == (1, 3)

    def test_cell_kinds(self) -> None:
        layout = parse_layout(_corridor_text())
        assert layout.cells[0][0] == Workstation(1)
        assert layout.cells[1][3] == DropOff(1)
        assert layout.cells[1][1] == Void()
        assert layout.cells[3][0] == Ordinary(frozenset({Heading.N, Heading.W}))
        assert layout.allowed(1, 1) == frozenset()

    def test_station_neighbours(self) -> None:
        layout = parse_layout(_corridor_text())
        assert layout.entrance_neighbors(1) == [(1, 0, Heading.N)]
        assert layout.exit_neighbors(1) == [(0, 1, Heading.E)]
        assert layout.drop_neighbors(1) == [(0, 3)]

    def test_index_and_coords_are_inverse(self) -> None:
        layout = parse_layout(_corridor_text())
        assert layout.index(3, 5) == 23
        assert layout.coords(23) == (3, 5)

    def test_neighbor_off_grid_is_none(self) -> None:
        layout = parse_layout(_corridor_text())
        assert layout.neighbor(0, 0, Heading.N) is None
        assert layout.neighbor(0, 0, Heading.S) == (1, 0)

    def test_comment_lines_are_ignored(self) -> None:
        text = "# a comment\n1 3\n  # indented comment\nW1 E W\n"
        with pytest.raises(UnreachableElement):
            # Parses past the comments; fails only on the workstation.
            parse_layout(text)

    def test_serialize_parses_back(self) -> None:
        layout = parse_layout(_corridor_text())
        again = parse_layout(serialize_layout(layout))
        assert again == layout
        assert serialize_layout(again) == serialize_layout(layout)


class TestLayoutErrors:
    def test_missing_header(self) -> None:
        with pytest.raises(LayoutSyntaxError):
            parse_layout("")

    def test_non_numeric_header(self) -> None:
        with pytest.raises(LayoutSyntaxError) as exc_info:
            parse_layout("two 3\n")
        assert exc_info.value.line == 1

    def test_unknown_token_reports_position(self) -> None:
        text = "1 3\nE X E\n"
        with pytest.raises(LayoutSyntaxError) as exc_info:
            parse_layout(text)
        assert (exc_info.value.line, exc_info.value.col) == (2, 3)

    def test_repeated_heading_letter_is_a_syntax_error(self) -> None:
        with pytest.raises(LayoutSyntaxError):
            parse_layout("1 1\nEE\n")

    def test_too_few_tokens(self) -> None:
        with pytest.raises(LayoutSyntaxError, match="expected 4 cell tokens"):
            parse_layout("2 2\nE E\nE\n")

    def test_too_many_tokens(self) -> None:
        with pytest.raises(LayoutSyntaxError, match="extra token"):
            parse_layout("1 2\nE E E\n")

    def test_opposite_headings(self) -> None:
        with pytest.raises(InvariantViolation) as exc_info:
            parse_layout("1 1\nNS\n")
        assert exc_info.value.kind == "opposite-headings"
        assert exc_info.value.cell == (0, 0)

    def test_three_headings(self) -> None:
        with pytest.raises(InvariantViolation) as exc_info:
            parse_layout("1 1\nNES\n")
        assert exc_info.value.kind == "heading-count"

    def test_duplicate_station_id(self) -> None:
        text = "2 3\nD1 E D1\nE E E\n"
        with pytest.raises(InvariantViolation) as exc_info:
            parse_layout(text)
        assert exc_info.value.kind == "duplicate-id"

    def test_station_ids_must_start_at_one(self) -> None:
        text = "2 3\nD2 E E\nE E E\n"
        with pytest.raises(InvariantViolation) as exc_info:
            parse_layout(text)
        assert exc_info.value.kind == "non-contiguous-ids"

    def test_workstation_without_entrance(self) -> None:
        with pytest.raises(UnreachableElement) as exc_info:
            parse_layout("1 3\nW1 E E\n")
        assert exc_info.value.element == "W1"

    def test_workstation_without_exit(self) -> None:
        with pytest.raises(UnreachableElement) as exc_info:
            parse_layout("1 3\nW1 W W\n")
        assert exc_info.value.element == "W1"

    def test_dropoff_without_ordinary_neighbour(self) -> None:
        with pytest.raises(UnreachableElement) as exc_info:
            parse_layout("2 2\nD1 .\n. E\n")
        assert exc_info.value.element == "D1"

    def test_all_layout_errors_are_value_errors(self) -> None:
        with pytest.raises(ValueError):
            parse_layout("1 1\nNS\n")


# ---------------------------------------------------------------------------
# Demand
# ---------------------------------------------------------------------------


class TestDemand:
    def test_uniform_spreads_total(self) -> None:
        demand = Demand.uniform([1, 2, 3, 4], 0.2)
        assert demand.of(3) == pytest.approx(0.05)
        assert demand.total == pytest.approx(0.2)

    def test_uniform_without_dropoffs_is_empty(self) -> None:
        assert Demand.uniform([], 1.0).total == 0.0

    def test_unknown_dropoff_has_zero_demand(self) -> None:
        assert Demand({1: 0.1}).of(7) == 0.0

    @pytest.mark.parametrize("value", [-0.1, float("inf"), float("nan")])
    def test_rejects_bad_values(self, value: float) -> None:
        with pytest.raises(ValueError):
            Demand({1: value})

    def test_rejects_bad_ids(self) -> None:
        with pytest.raises(ValueError):
            Demand({0: 0.1})

    def test_parse_csv(self) -> None:
        demand = parse_demand("dropoff_id,demand\n1,0.25\n2,0.5\n")
        assert dict(demand.per_dropoff) == {1: 0.25, 2: 0.5}

    def test_parse_rejects_missing_header(self) -> None:
        with pytest.raises(ValueError, match="header"):
            parse_demand("1,0.25\n")

    def test_parse_rejects_duplicates(self) -> None:
        with pytest.raises(ValueError, match="duplicate"):
            parse_demand("dropoff_id,demand\n1,0.1\n1,0.2\n")

    def test_serialize_is_sorted(self) -> None:
        text = serialize_demand(Demand({2: 0.5, 1: 0.25}))
        assert text == "dropoff_id,demand\n1,0.25\n2,0.5\n"

    @given(
        ids=st.lists(st.integers(min_value=1, max_value=500), min_size=1, max_size=40, unique=True),
        total=st.floats(min_value=0.0, max_value=10.0, allow_nan=False),
    )
    def test_uniform_preserves_total(self, ids: list[int], total: float) -> None:
        assert Demand.uniform(ids, total).total == pytest.approx(total, abs=1e-9)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


class TestGenerator:
    def test_default_floor(self) -> None:
        layout = generate_standard_layout(19, 20, 2, 30, seed=0)
        assert (layout.rows, layout.cols) == (19, 20)
        assert layout.workstation_ids == [1, 2]
        assert layout.dropoff_ids == list(range(1, 31))
        assert all(layout.workstation_cell(w)[1] == 0 for w in layout.workstation_ids)

    def test_same_seed_same_layout(self) -> None:
        a = generate_standard_layout(19, 20, 2, 30, seed=7)
        b = generate_standard_layout(19, 20, 2, 30, seed=7)
        assert serialize_layout(a) == serialize_layout(b)

    def test_dropoffs_keep_their_distance(self) -> None:
        layout = generate_standard_layout(19, 20, 2, 30, seed=3)
        cells = [layout.dropoff_cell(d) for d in layout.dropoff_ids]
        for i, (r0, c0) in enumerate(cells):
            assert 0 < r0 < layout.rows - 1 and 0 < c0 < layout.cols - 1
            for r1, c1 in cells[i + 1:]:
                assert max(abs(r0 - r1), abs(c0 - c1)) >= 2, f"D at {(r0, c0)} touches D at {(r1, c1)}"

    def test_generated_network_is_connected(self) -> None:
        layout = generate_standard_layout(19, 20, 2, 30, seed=0)
        network = build_flow_network(layout, Demand.uniform(layout.dropoff_ids, 0.1))
        assert network.n_nodes > 0

    @pytest.mark.parametrize(
        ("rows", "cols", "workstations", "dropoffs"),
        [
            (2, 5, 1, 1),
            (5, 5, 3, 1),
            (5, 5, 1, 20),
            (5, 5, 0, 1),
        ],
    )
    def test_infeasible_requests(self, rows: int, cols: int, workstations: int, dropoffs: int) -> None:
        with pytest.raises(PlacementInfeasible):
            generate_standard_layout(rows, cols, workstations, dropoffs, seed=0)

    @settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.filter_too_much])
    @given(
        rows=st.integers(min_value=7, max_value=12),
        cols=st.integers(min_value=7, max_value=12),
        dropoffs=st.integers(min_value=1, max_value=3),
        seed=st.integers(min_value=0, max_value=1000),
    )
    def test_generated_layouts_serialize_faithfully(self, rows: int, cols: int, dropoffs: int, seed: int) -> None:
        try:
            layout = generate_standard_layout(rows, cols, 1, dropoffs, seed)
        except PlacementInfeasible:
            assume(False)
            return
        assert parse_layout(serialize_layout(layout)) == layout
