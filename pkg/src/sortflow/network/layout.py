"""Grid layouts for robotic sorting systems: types, parsing and serialization.

A :class:`Layout` is a rectangular grid of :data:`CellSpec` values.  Ordinary
cells carry the set of headings robots may travel in while on the cell;
workstation and drop-off cells are stations robots interact with from a
neighbouring ordinary cell; void cells are not part of the floor.

Layout file grammar
-------------------
- Lines whose first non-blank character is ``#`` are comments.
- The first content line is ``rows cols``.
- Then ``rows * cols`` whitespace-separated tokens in row-major order:
    - ``.``            void cell
    - ``N``/``E``/``S``/``W`` concatenated (e.g. ``NE``) ordinary cell
    - ``W<id>``        workstation ``id`` (1-based)
    - ``D<id>``        drop-off point ``id`` (1-based)

Design notes
------------
- Row 0 is the northern edge; ``N`` decreases the row index and ``E``
  increases the column index.
- A workstation needs an *entrance* (an ordinary neighbour whose headings
  include the direction pointing at the workstation) and an *exit* (an
  ordinary neighbour that allows the direction pointing away from it).
- A drop-off needs at least one ordinary neighbour; robots drop from there
  with any heading.
- :class:`Layout` is a frozen dataclass validated in ``__post_init__`` so
  every instance in circulation satisfies the invariants above.
"""

from __future__ import annotations

import csv
import io
import re
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Union

# ---------------------------------------------------------------------------
# Headings
# ---------------------------------------------------------------------------


class Heading(str, Enum):
    """A travel direction on the grid."""

    N = "N"
    E = "E"
    S = "S"
    W = "W"

    @property
    def delta(self) -> tuple[int, int]:
        """Return the ``(d_row, d_col)`` step taken when moving this way."""
        return _DELTAS[self]

    @property
    def opposite(self) -> Heading:
        """Return the heading pointing the other way."""
        return _OPPOSITES[self]


#: Canonical heading order used for node and arc enumeration.
HEADING_ORDER: tuple[Heading, ...] = (Heading.N, Heading.E, Heading.S, Heading.W)

_DELTAS: dict[Heading, tuple[int, int]] = {
    Heading.N: (-1, 0),
    Heading.E: (0, 1),
    Heading.S: (1, 0),
    Heading.W: (0, -1),
}

_OPPOSITES: dict[Heading, Heading] = {
    Heading.N: Heading.S,
    Heading.S: Heading.N,
    Heading.E: Heading.W,
    Heading.W: Heading.E,
}

_STATION_TOKEN: re.Pattern[str] = re.compile(r"^([WD])(\d+)$")
_HEADING_TOKEN: re.Pattern[str] = re.compile(r"^[NESW]{1,4}$")


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class LayoutError(ValueError):
    """Base class for every layout parsing or validation failure."""


class LayoutSyntaxError(LayoutError):
    """Raised when a layout file does not follow the grid grammar.

    Attributes
    ----------
    line, col:
        1-based position of the offending token (``0`` when the problem is
        the file as a whole, e.g. too few tokens).
    """

    def __init__(self, message: str, line: int, col: int) -> None:
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class InvariantViolation(LayoutError):
    """Raised when a syntactically valid grid breaks a layout invariant.

    Attributes
    ----------
    kind:
        Short machine-readable tag such as ``"opposite-headings"``.
    cell:
        ``(row, col)`` of the offending cell, or ``None`` for global checks.
    """

    def __init__(self, kind: str, cell: tuple[int, int] | None, detail: str = "") -> None:
        where = f" at cell {cell}" if cell is not None else ""
        super().__init__(f"{kind}{where}{': ' + detail if detail else ''}")
        self.kind = kind
        self.cell = cell


class UnreachableElement(LayoutError):
    """Raised when a workstation or drop-off has no usable ordinary neighbour.

    Attributes
    ----------
    element:
        Station label, e.g. ``"W1"`` or ``"D7"``.
    """

    def __init__(self, element: str, detail: str) -> None:
        super().__init__(f"{element}: {detail}")
        self.element = element


# ---------------------------------------------------------------------------
# Cell specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ordinary:
    """A floor cell robots may occupy, with its allowed travel headings."""

    headings: frozenset[Heading]

    @property
    def token(self) -> str:
        """Return the canonical layout-file token (headings in N,E,S,W order)."""
        return "".join(h.value for h in HEADING_ORDER if h in self.headings)


@dataclass(frozen=True)
class Workstation:
    """A loading station; robots queue off-grid behind it."""

    id: int

    @property
    def token(self) -> str:
        return f"W{self.id}"


@dataclass(frozen=True)
class DropOff:
    """A drop-off hole; robots never enter it."""

    id: int

    @property
    def token(self) -> str:
        return f"D{self.id}"


@dataclass(frozen=True)
class Void:
    """A cell that is not part of the floor."""

    @property
    def token(self) -> str:
        return "."


CellSpec = Union[Ordinary, Workstation, DropOff, Void]


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    """A validated rectangular grid layout.

    Attributes
    ----------
    rows, cols:
        Grid dimensions (both positive).
    cells:
        Row-major grid of :data:`CellSpec` values, ``cells[r][c]``.
    """

    rows: int
    cols: int
    cells: tuple[tuple[CellSpec, ...], ...]
    _stations: dict[str, dict[int, tuple[int, int]]] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        """Validate the grid against every layout invariant.

        Raises
        ------
        InvariantViolation
            Shape mismatch, bad heading sets, or bad station ids.
        UnreachableElement
            A station lacks the ordinary neighbours it needs.
        """
        if self.rows <= 0 or self.cols <= 0:
            raise InvariantViolation("non-positive-size", None, f"{self.rows}x{self.cols}")
        if len(self.cells) != self.rows or any(len(row) != self.cols for row in self.cells):
            raise InvariantViolation("shape-mismatch", None, f"expected {self.rows}x{self.cols}")

        stations: dict[str, dict[int, tuple[int, int]]] = {"W": {}, "D": {}}
        for r, c, spec in self.iter_cells():
            if isinstance(spec, Ordinary):
                _check_headings(spec.headings, (r, c))
            elif isinstance(spec, (Workstation, DropOff)):
                prefix = "W" if isinstance(spec, Workstation) else "D"
                if spec.id in stations[prefix]:
                    raise InvariantViolation("duplicate-id", (r, c), f"{prefix}{spec.id}")
                stations[prefix][spec.id] = (r, c)
        for prefix, found in stations.items():
            if sorted(found) != list(range(1, len(found) + 1)):
                raise InvariantViolation(
                    "non-contiguous-ids", None, f"{prefix} ids {sorted(found)} must be 1..{len(found)}"
                )
        object.__setattr__(self, "_stations", stations)

        for ws_id in self.workstation_ids:
            if not self.entrance_neighbors(ws_id):
                raise UnreachableElement(f"W{ws_id}", "no ordinary neighbour heads into it")
            if not self.exit_neighbors(ws_id):
                raise UnreachableElement(f"W{ws_id}", "no ordinary neighbour to exit onto")
        for d_id in self.dropoff_ids:
            if not self.drop_neighbors(d_id):
                raise UnreachableElement(f"D{d_id}", "no ordinary neighbour to drop from")

    # -- grid access --------------------------------------------------------

    def iter_cells(self) -> Iterator[tuple[int, int, CellSpec]]:
        """Yield ``(row, col, spec)`` in row-major order."""
        for r, row in enumerate(self.cells):
            for c, spec in enumerate(row):
                yield r, c, spec

    def index(self, r: int, c: int) -> int:
        """Return the row-major cell index of ``(r, c)``."""
        return r * self.cols + c

    def coords(self, index: int) -> tuple[int, int]:
        """Return ``(row, col)`` for a row-major cell index."""
        return divmod(index, self.cols)

    def neighbor(self, r: int, c: int, heading: Heading) -> tuple[int, int] | None:
        """Return the grid neighbour of ``(r, c)`` in *heading*, if on the grid."""
        dr, dc = heading.delta
        nr, nc = r + dr, c + dc
        if 0 <= nr < self.rows and 0 <= nc < self.cols:
            return nr, nc
        return None

    def allowed(self, r: int, c: int) -> frozenset[Heading]:
        """Return the allowed headings of ``(r, c)`` (empty for non-ordinary cells)."""
        spec = self.cells[r][c]
        return spec.headings if isinstance(spec, Ordinary) else frozenset()

    # -- stations -----------------------------------------------------------

    @property
    def workstation_ids(self) -> list[int]:
        return sorted(self._stations["W"])

    @property
    def dropoff_ids(self) -> list[int]:
        return sorted(self._stations["D"])

    def workstation_cell(self, ws_id: int) -> tuple[int, int]:
        """Return the grid position of workstation *ws_id*."""
        return self._stations["W"][ws_id]

    def dropoff_cell(self, d_id: int) -> tuple[int, int]:
        """Return the grid position of drop-off *d_id*."""
        return self._stations["D"][d_id]

    def entrance_neighbors(self, ws_id: int) -> list[tuple[int, int, Heading]]:
        """Return ``(row, col, heading)`` of cells whose *heading* leads into the workstation."""
        wr, wc = self.workstation_cell(ws_id)
        found = []
        for h in HEADING_ORDER:
            pos = self.neighbor(wr, wc, h)
            if pos is None:
                continue
            inward = h.opposite
            if inward in self.allowed(*pos):
                found.append((pos[0], pos[1], inward))
        return found

    def exit_neighbors(self, ws_id: int) -> list[tuple[int, int, Heading]]:
        """Return ``(row, col, heading)`` reached when leaving the workstation."""
        wr, wc = self.workstation_cell(ws_id)
        found = []
        for h in HEADING_ORDER:
            pos = self.neighbor(wr, wc, h)
            if pos is not None and h in self.allowed(*pos):
                found.append((pos[0], pos[1], h))
        return found

    def drop_neighbors(self, d_id: int) -> list[tuple[int, int]]:
        """Return ordinary cells a robot can drop into drop-off *d_id* from."""
        dr, dc = self.dropoff_cell(d_id)
        found = []
        for h in HEADING_ORDER:
            pos = self.neighbor(dr, dc, h)
            if pos is not None and self.allowed(*pos):
                found.append(pos)
        return found


def _check_headings(headings: frozenset[Heading], cell: tuple[int, int]) -> None:
    if not 1 <= len(headings) <= 2:
        raise InvariantViolation("heading-count", cell, f"{len(headings)} headings")
    for h in headings:
        if h.opposite in headings:
            raise InvariantViolation("opposite-headings", cell, f"{h.value}{h.opposite.value}")


# ---------------------------------------------------------------------------
# Parsing / serialization
# ---------------------------------------------------------------------------


def _tokens(text: str) -> Iterator[tuple[str, int, int]]:
    for line_no, line in enumerate(text.splitlines(), start=1):
        if line.lstrip().startswith("#"):
            continue
        for match in re.finditer(r"\S+", line):
            yield match.group(0), line_no, match.start() + 1


def _parse_token(token: str, line: int, col: int) -> CellSpec:
    if token == ".":
        return Void()
    station = _STATION_TOKEN.match(token)
    if station is not None:
        kind, ident = station.group(1), int(station.group(2))
        if ident < 1:
            raise LayoutSyntaxError(f"station id must be >= 1 in {token!r}", line, col)
        return Workstation(ident) if kind == "W" else DropOff(ident)
    if _HEADING_TOKEN.match(token) is None or len(set(token)) != len(token):
        raise LayoutSyntaxError(f"unrecognised cell token {token!r}", line, col)
    return Ordinary(frozenset(Heading(ch) for ch in token))


def parse_layout(text: str) -> Layout:
    """Parse layout-file contents into a validated :class:`Layout`.

    Parameters
    ----------
    text:
        Full contents of a layout file (see module docstring for the grammar).

    Returns
    -------
    Layout
        A layout satisfying every invariant.

    Raises
    ------
    LayoutSyntaxError
        Malformed header, unknown token, or wrong token count.
    InvariantViolation
        E.g. a cell declaring opposite headings such as ``NS``.
    UnreachableElement
        A station without the neighbours it needs.
    """
    stream = _tokens(text)
    first, second = next(stream, None), next(stream, None)
    if first is None or second is None:
        raise LayoutSyntaxError("missing 'rows cols' header", 1, 1)
    dims: list[int] = []
    for token, line, col in (first, second):
        if not token.isdigit() or int(token) <= 0:
            raise LayoutSyntaxError(f"grid size must be a positive integer, got {token!r}", line, col)
        dims.append(int(token))
    rows, cols = dims

    specs: list[CellSpec] = []
    last = (second[1], second[2])
    for token, line, col in stream:
        if len(specs) == rows * cols:
            raise LayoutSyntaxError(f"unexpected extra token {token!r}", line, col)
        specs.append(_parse_token(token, line, col))
        last = (line, col)
    if len(specs) != rows * cols:
        raise LayoutSyntaxError(
            f"expected {rows * cols} cell tokens, found {len(specs)}", last[0], last[1]
        )
    grid = tuple(tuple(specs[r * cols:(r + 1) * cols]) for r in range(rows))
    return Layout(rows=rows, cols=cols, cells=grid)


def serialize_layout(layout: Layout) -> str:
    """Render *layout* in the layout-file grammar; inverse of :func:`parse_layout`."""
    width = max(len(spec.token) for _, _, spec in layout.iter_cells())
    lines = [f"{layout.rows} {layout.cols}"]
    for row in layout.cells:
        lines.append(" ".join(spec.token.ljust(width) for spec in row).rstrip())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Demand
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Demand:
    """Per-drop-off parcel demand in flow units per time step.

    Forward and backward demand for a drop-off are both equal to its entry
    here: every parcel delivered is one robot returning.
    """

    per_dropoff: Mapping[int, float]

    def __post_init__(self) -> None:
        for d_id, value in self.per_dropoff.items():
            if not isinstance(d_id, int) or d_id < 1:
                raise ValueError(f"drop-off id must be a positive int, got {d_id!r}")
            if not value >= 0.0 or value == float("inf"):
                raise ValueError(f"demand for D{d_id} must be finite and >= 0, got {value!r}")

    @classmethod
    def uniform(cls, dropoff_ids: list[int], total: float) -> Demand:
        """Spread *total* evenly over *dropoff_ids*."""
        if not dropoff_ids:
            return cls({})
        share = total / len(dropoff_ids)
        return cls({d_id: share for d_id in dropoff_ids})

    @property
    def total(self) -> float:
        """Total demand λ across all drop-offs."""
        return float(sum(self.per_dropoff.values()))

    def of(self, d_id: int) -> float:
        return float(self.per_dropoff.get(d_id, 0.0))


def parse_demand(text: str) -> Demand:
    """Parse a ``dropoff_id,demand`` CSV into a :class:`Demand`.

    Raises
    ------
    ValueError
        Missing header columns, duplicate ids, or unparseable numbers.
    """
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"dropoff_id", "demand"} <= set(reader.fieldnames):
        raise ValueError("demand CSV must have a 'dropoff_id,demand' header")
    values: dict[int, float] = {}
    for row in reader:
        d_id = int(row["dropoff_id"])
        if d_id in values:
            raise ValueError(f"duplicate drop-off id {d_id} in demand CSV")
        values[d_id] = float(row["demand"])
    return Demand(values)


def serialize_demand(demand: Demand) -> str:
    """Render *demand* as a ``dropoff_id,demand`` CSV."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dropoff_id", "demand"])
    for d_id in sorted(demand.per_dropoff):
        writer.writerow([d_id, repr(float(demand.per_dropoff[d_id]))])
    return buf.getvalue()
