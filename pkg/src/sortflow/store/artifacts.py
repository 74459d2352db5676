"""ArtifactStore: file-backed persistence for solve, decomposition and trial outputs.

Directory layout under the store root
-------------------------------------
- ``solve/<hash>/solution.csv``     link flow, one row per arc.
- ``solve/<hash>/trace.csv``        Frank-Wolfe history.
- ``solve/<hash>/pathflows.csv``    recovered paths.
- ``solve/<hash>/turning_flow.csv`` optimal turning flow, ``rows x cols``.
- ``trials/<group>/R<r>/seed<k>.json`` one metrics record per trial.
- ``trials/<group>/R<r>/turning.csv`` and ``traversal.csv`` heatmaps.
- ``report/summary.csv`` and ``report/report.json``.

Design notes
------------
- ``<hash>`` is a content hash of the offline inputs, so a λ sweep solves
  each λ once and reuses the result on later runs.
- Floats are written with ``repr`` and JSON with sorted keys, so the same
  inputs give byte-identical files.
- Every writer has a reader that validates rows through the models in
  :mod:`sortflow.store.models`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from sortflow.decompose.paths import PathFlow, PathFlowTable
from sortflow.delay.cost import LinkFlow
from sortflow.network.graph import FlowNetwork
from sortflow.solver.frank_wolfe import SolveTrace
from sortflow.store.models import (
    PATHFLOW_COLUMNS,
    SOLUTION_COLUMNS,
    TRACE_COLUMNS,
    MetricsRecord,
    PathFlowRecord,
    SolutionRow,
    SummaryRow,
    TraceRecord,
)

logger = logging.getLogger(__name__)


class ArtifactError(ValueError):
    """Raised when an artifact file is missing or does not match its network."""


def content_hash(*parts: str) -> str:
    """Return a short SHA-256 digest of *parts*."""
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode("utf-8"))
        digest.update(b"\0")
    return digest.hexdigest()[:16]


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def _write_csv(path: Path, columns: Iterable[str], rows: Iterable[dict[str, Any]]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _read_csv(path: Path) -> list[dict[str, str]]:
    if not path.is_file():
        raise ArtifactError(f"{path} does not exist")
    with path.open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Solution / trace / path flows
# ---------------------------------------------------------------------------


def write_solution(path: Path, network: FlowNetwork, flow: LinkFlow) -> None:
    rows = (
        SolutionRow(
            arc_id=i,
            tail=network.label(a.tail),
            head=network.label(a.head),
            kind=a.kind,
            flow_fwd=float(flow.forward[i]),
            flow_bwd=float(flow.backward[i]),
        ).model_dump(mode="json")
        for i, a in enumerate(network.arcs)
    )
    _write_csv(path, SOLUTION_COLUMNS, rows)


def read_solution(path: Path, network: FlowNetwork) -> LinkFlow:
    """Read a solution file back into a :class:`LinkFlow`.

    Raises
    ------
    ArtifactError
        If the arcs listed do not match *network*.
    """
    rows = [SolutionRow.model_validate(r) for r in _read_csv(path)]
    if len(rows) != network.n_arcs:
        raise ArtifactError(f"{path} lists {len(rows)} arcs, the network has {network.n_arcs}")
    forward = np.zeros(network.n_arcs)
    backward = np.zeros(network.n_arcs)
    for row in rows:
        arc = network.arcs[row.arc_id]
        if (network.label(arc.tail), network.label(arc.head), arc.kind) != (row.tail, row.head, row.kind):
            raise ArtifactError(f"{path}: arc {row.arc_id} does not match the network")
        forward[row.arc_id] = row.flow_fwd
        backward[row.arc_id] = row.flow_bwd
    return LinkFlow(forward, backward)


def write_trace(path: Path, trace: SolveTrace) -> None:
    _write_csv(path, TRACE_COLUMNS, (TraceRecord.from_row(r).model_dump() for r in trace.rows))


def read_trace(path: Path) -> list[TraceRecord]:
    return [TraceRecord.model_validate(r) for r in _read_csv(path)]


def write_pathflows(path: Path, network: FlowNetwork, table: PathFlowTable) -> None:
    rows = (
        {
            "direction": e.direction.value,
            "dropoff": e.dropoff,
            "workstation": e.workstation,
            "intensity": e.intensity,
            "nodes": " ".join(network.label(n) for n in e.nodes),
        }
        for e in table.entries
    )
    _write_csv(path, PATHFLOW_COLUMNS, rows)


def read_pathflows(path: Path, network: FlowNetwork) -> PathFlowTable:
    """Read a path-flow file back into a :class:`PathFlowTable`.

    Raises
    ------
    ArtifactError
        If a node label is unknown to *network*.
    """
    index = network.label_index
    entries = []
    for raw in _read_csv(path):
        record = PathFlowRecord.model_validate({**raw, "nodes": raw["nodes"].split()})
        try:
            nodes = tuple(index[label] for label in record.nodes)
        except KeyError as exc:
            raise ArtifactError(f"{path}: unknown node label {exc.args[0]!r}") from None
        entries.append(
            PathFlow(record.direction, record.dropoff, record.workstation, nodes, record.intensity)
        )
    return PathFlowTable(tuple(entries))


# ---------------------------------------------------------------------------
# Matrices
# ---------------------------------------------------------------------------


def write_matrix(path: Path, matrix: npt.ArrayLike) -> None:
    """Write a 2-D array as a header-less CSV grid."""
    grid = np.atleast_2d(np.asarray(matrix))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in grid:
        writer.writerow([_fmt(v) for v in row.tolist()])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_matrix(path: Path) -> npt.NDArray[np.float64]:
    if not path.is_file():
        raise ArtifactError(f"{path} does not exist")
    with path.open(encoding="utf-8", newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------


class ArtifactStore:
    """All artifacts of one experiment, rooted at an output directory.

    Parameters
    ----------
    root:
        Output directory; created on first write.
    """

    def __init__(self, root: Path) -> None:
        self.root = root

    # -- paths --------------------------------------------------------------

    def solve_dir(self, key: str) -> Path:
        return self.root / "solve" / key

    def solution_path(self, key: str) -> Path:
        return self.solve_dir(key) / "solution.csv"

    def trace_path(self, key: str) -> Path:
        return self.solve_dir(key) / "trace.csv"

    def pathflow_path(self, key: str) -> Path:
        return self.solve_dir(key) / "pathflows.csv"

    def turning_flow_path(self, key: str) -> Path:
        return self.solve_dir(key) / "turning_flow.csv"

    def trial_dir(self, group: str, robots: int) -> Path:
        return self.root / "trials" / group / f"R{robots}"

    def metrics_path(self, group: str, robots: int, seed: int) -> Path:
        return self.trial_dir(group, robots) / f"seed{seed}.json"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    # -- solve outputs ------------------------------------------------------

    def has_solution(self, key: str) -> bool:
        return self.solution_path(key).is_file() and self.trace_path(key).is_file()

    def has_pathflows(self, key: str) -> bool:
        return self.pathflow_path(key).is_file()

    def save_solution(self, key: str, network: FlowNetwork, flow: LinkFlow, trace: SolveTrace) -> None:
        write_solution(self.solution_path(key), network, flow)
        write_trace(self.trace_path(key), trace)
        logger.info("Wrote solution %s (%d iterations)", key, trace.iterations)

    def load_solution(self, key: str, network: FlowNetwork) -> LinkFlow:
        return read_solution(self.solution_path(key), network)

    def save_pathflows(self, key: str, network: FlowNetwork, table: PathFlowTable) -> None:
        write_pathflows(self.pathflow_path(key), network, table)
        logger.info("Wrote %d paths for %s", len(table), key)

    def load_pathflows(self, key: str, network: FlowNetwork) -> PathFlowTable:
        return read_pathflows(self.pathflow_path(key), network)

    # -- trials -------------------------------------------------------------

    def save_metrics(self, record: MetricsRecord) -> Path:
        path = self.metrics_path(record.group, record.robots, record.seed)
        _write_json(path, record.model_dump(mode="json"))
        return path

    def load_metrics(self, directory: Path | None = None) -> list[MetricsRecord]:
        """Read every metrics record under *directory* (default: the trials tree)."""
        base = directory or self.root / "trials"
        records = []
        for path in sorted(base.rglob("seed*.json")):
            records.append(MetricsRecord.model_validate_json(path.read_text(encoding="utf-8")))
        return records

    def save_heatmaps(
        self, group: str, robots: int, turning: npt.ArrayLike, traversal: npt.ArrayLike
    ) -> None:
        directory = self.trial_dir(group, robots)
        write_matrix(directory / "turning.csv", turning)
        write_matrix(directory / "traversal.csv", traversal)

    # -- report -------------------------------------------------------------

    def save_report(self, rows: list[SummaryRow], extra: dict[str, Any]) -> None:
        columns = list(SummaryRow.model_fields)
        _write_csv(
            self.report_dir / "summary.csv",
            columns,
            (r.model_dump() for r in rows),
        )
        _write_json(
            self.report_dir / "report.json",
            {"rows": [r.model_dump(mode="json") for r in rows], **extra},
        )
        logger.info("Wrote report with %d rows to %s", len(rows), self.report_dir)

    def load_report(self) -> list[SummaryRow]:
        rows = _read_csv(self.report_dir / "summary.csv")
        return [SummaryRow.model_validate({k: (v if v != "" else None) for k, v in r.items()}) for r in rows]
