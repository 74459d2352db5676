"""File artifacts and the records that cross the file boundary."""

from sortflow.store.artifacts import (
    ArtifactError,
    ArtifactStore,
    content_hash,
    read_matrix,
    read_pathflows,
    read_solution,
    read_trace,
    write_matrix,
    write_pathflows,
    write_solution,
    write_trace,
)
from sortflow.store.models import MetricsRecord, PathFlowRecord, SolutionRow, SummaryRow, TraceRecord

__all__ = [
    "ArtifactError",
    "ArtifactStore",
    "MetricsRecord",
    "PathFlowRecord",
    "SolutionRow",
    "SummaryRow",
    "TraceRecord",
    "content_hash",
    "read_matrix",
    "read_pathflows",
    "read_solution",
    "read_trace",
    "write_matrix",
    "write_pathflows",
    "write_solution",
    "write_trace",
]
