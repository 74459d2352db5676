"""Deterministic generator for standard sorting-floor layouts.

The generated floor follows a common convention for unidirectional grids:

- The perimeter is a counter-clockwise ring: the top row runs west, the
  left column south, the bottom row east and the right column north.
- Interior rows alternate eastbound (odd rows) and westbound (even rows);
  interior columns alternate northbound (odd columns) and southbound (even
  columns).  Every ordinary cell allows its row and its column direction.
- Workstations sit on the west edge, evenly spaced, fed by the southbound
  perimeter column.
- Drop-offs are interior holes placed by a seeded shuffle, never within
  one cell (including diagonally) of another station, so every hole keeps
  a full ring of ordinary cells around it.

This heading convention is a choice for scenario generation, not a
property of any particular installation.
"""

from __future__ import annotations

import logging

import numpy as np

from sortflow.network.graph import DisconnectedCommodity, build_flow_network
from sortflow.network.layout import (
    CellSpec,
    Demand,
    DropOff,
    Heading,
    Layout,
    LayoutError,
    Ordinary,
    Workstation,
)

logger = logging.getLogger(__name__)

#: Shuffles tried before giving up on drop-off placement.
_PLACEMENT_ATTEMPTS: int = 25


class PlacementInfeasible(ValueError):
    """Raised when the requested stations do not fit on the requested grid."""


def _row_heading(r: int, rows: int) -> Heading:
    if r == 0:
        return Heading.W
    if r == rows - 1:
        return Heading.E
    return Heading.E if r % 2 == 1 else Heading.W


def _col_heading(c: int, cols: int) -> Heading:
    if c == 0:
        return Heading.S
    if c == cols - 1:
        return Heading.N
    return Heading.N if c % 2 == 1 else Heading.S


def _workstation_rows(rows: int, n_workstations: int) -> list[int]:
    span = rows - 2
    if n_workstations > (span + 1) // 2:
        raise PlacementInfeasible(
            f"{n_workstations} workstations do not fit on a west edge of {rows} rows"
        )
    return [1 + ((2 * k + 1) * span) // (2 * n_workstations) for k in range(n_workstations)]


def _place_dropoffs(
    rows: int,
    cols: int,
    blocked: list[tuple[int, int]],
    n_dropoffs: int,
    rng: np.random.Generator,
) -> list[tuple[int, int]]:
    candidates = [
        (r, c)
        for r in range(1, rows - 1)
        for c in range(1, cols - 1)
        if all(max(abs(r - br), abs(c - bc)) >= 2 for br, bc in blocked)
    ]
    order = rng.permutation(len(candidates))
    chosen: list[tuple[int, int]] = []
    for i in order:
        r, c = candidates[int(i)]
        if all(max(abs(r - cr), abs(c - cc)) >= 2 for cr, cc in chosen):
            chosen.append((r, c))
            if len(chosen) == n_dropoffs:
                break
    return sorted(chosen)


def generate_standard_layout(
    rows: int, cols: int, n_workstations: int, n_dropoffs: int, seed: int
) -> Layout:
    """Generate a valid layout with the standard heading convention.

    Parameters
    ----------
    rows, cols:
        Grid size; both must be at least 3.
    n_workstations:
        Number of west-edge workstations (at least 1).
    n_dropoffs:
        Number of interior drop-off holes.
    seed:
        Seed for the drop-off placement; equal seeds give equal layouts.

    Returns
    -------
    Layout
        A layout whose flow network connects every drop-off both ways.

    Raises
    ------
    PlacementInfeasible
        If the stations cannot be placed with valid, connected neighbours.
    """
    if rows < 3 or cols < 3:
        raise PlacementInfeasible(f"grid {rows}x{cols} is too small (minimum 3x3)")
    if n_workstations < 1 or n_dropoffs < 0:
        raise PlacementInfeasible("need at least one workstation and a non-negative drop-off count")

    ws_cells = [(r, 0) for r in _workstation_rows(rows, n_workstations)]
    rng = np.random.default_rng(seed)
    for attempt in range(_PLACEMENT_ATTEMPTS):
        dropoffs = _place_dropoffs(rows, cols, ws_cells, n_dropoffs, rng)
        if len(dropoffs) < n_dropoffs:
            continue
        grid: list[list[CellSpec]] = [
            [Ordinary(frozenset({_row_heading(r, rows), _col_heading(c, cols)})) for c in range(cols)]
            for r in range(rows)
        ]
        for ws_id, (r, c) in enumerate(ws_cells, start=1):
            grid[r][c] = Workstation(ws_id)
        for d_id, (r, c) in enumerate(dropoffs, start=1):
            grid[r][c] = DropOff(d_id)
        try:
            layout = Layout(rows=rows, cols=cols, cells=tuple(tuple(row) for row in grid))
            build_flow_network(layout, Demand.uniform(layout.dropoff_ids, 0.0))
        except (LayoutError, DisconnectedCommodity) as exc:
            logger.debug("Placement attempt %d rejected: %s", attempt, exc)
            continue
        return layout
    raise PlacementInfeasible(
        f"could not place {n_dropoffs} drop-offs on a {rows}x{cols} grid "
        f"with {n_workstations} workstations after {_PLACEMENT_ATTEMPTS} attempts"
    )
