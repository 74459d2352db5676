"""Records that cross the file boundary.

Every artifact row is a Pydantic v2 ``BaseModel`` so files are validated on
read.  Domain objects (link flows, path tables, simulator metrics) are
converted to and from these records in :mod:`sortflow.store.artifacts`.
"""

from __future__ import annotations

from pydantic import BaseModel, Field, field_validator

from sortflow.network.graph import ArcKind, Direction
from sortflow.sim.state import Metrics
from sortflow.solver.frank_wolfe import TraceRow

#: CSV column order of the solution file.
SOLUTION_COLUMNS: tuple[str, ...] = ("arc_id", "tail", "head", "kind", "flow_fwd", "flow_bwd")

#: CSV column order of the trace file.
TRACE_COLUMNS: tuple[str, ...] = ("iteration", "tc", "tc_linear", "alpha", "gap", "residual", "clamped")

#: CSV column order of the path-flow file.
PATHFLOW_COLUMNS: tuple[str, ...] = ("direction", "dropoff", "workstation", "intensity", "nodes")


class SolutionRow(BaseModel):
    """Flow on one arc, nodes given by label."""

    arc_id: int = Field(ge=0)
    tail: str
    head: str
    kind: ArcKind
    flow_fwd: float
    flow_bwd: float


class TraceRecord(BaseModel):
    """One Frank-Wolfe iteration."""

    iteration: int = Field(ge=1)
    tc: float
    tc_linear: float
    alpha: float = Field(ge=0.0, le=1.0)
    gap: float
    residual: float = Field(ge=0.0)
    clamped: int = Field(ge=0)

    @classmethod
    def from_row(cls, row: TraceRow) -> TraceRecord:
        return cls(
            iteration=row.iteration,
            tc=row.tc,
            tc_linear=row.tc_linear,
            alpha=row.alpha,
            gap=row.gap,
            residual=row.residual,
            clamped=row.clamped,
        )


class PathFlowRecord(BaseModel):
    """One recovered path; ``nodes`` are labels from ``S``/``T`` to ``T``/``S``."""

    direction: Direction
    dropoff: int = Field(ge=1)
    workstation: int = Field(ge=1)
    intensity: float = Field(gt=0.0)
    nodes: list[str]

    @field_validator("nodes")
    @classmethod
    def _long_enough(cls, v: list[str]) -> list[str]:
        if len(v) < 4:
            raise ValueError("a path needs at least S/T, a workstation and a drop-off")
        return v


class MetricsRecord(BaseModel):
    """Outcome of one trial as written to its JSON file.

    Attributes
    ----------
    config_hash:
        Content hash of the offline inputs the trial ran with.
    group:
        Report group: the policy name, or ``flow@<lambda>`` for flow-guided
        trials.
    """

    config_hash: str
    group: str
    policy: str
    lam: float | None = None
    robots: int = Field(ge=0)
    seed: int
    ticks: int = Field(ge=1)
    warmup: int = Field(ge=0)
    throughput: float = Field(ge=0.0)
    drops: int = Field(ge=0)
    deadlocks: int = Field(ge=0)
    unresolved: int = Field(ge=0)
    flagged: bool
    flag_reason: str | None = None
    mean_trip_time: float = Field(ge=0.0)
    replans: int = Field(ge=0)
    predicted_tc: float | None = None
    measured_tc: float | None = None

    @classmethod
    def from_metrics(
        cls,
        metrics: Metrics,
        config_hash: str,
        group: str,
        lam: float | None = None,
        predicted_tc: float | None = None,
    ) -> MetricsRecord:
        return cls(
            config_hash=config_hash,
            group=group,
            policy=metrics.policy,
            lam=lam,
            robots=metrics.robots,
            seed=metrics.seed,
            ticks=metrics.ticks,
            warmup=metrics.warmup,
            throughput=metrics.throughput,
            drops=metrics.drops,
            deadlocks=metrics.deadlocks,
            unresolved=metrics.unresolved,
            flagged=metrics.flagged,
            flag_reason=metrics.flag_reason,
            mean_trip_time=metrics.mean_trip_time,
            replans=metrics.replans,
            predicted_tc=None if predicted_tc is None or predicted_tc == float("inf") else predicted_tc,
            measured_tc=float(metrics.robots),
        )


class SummaryRow(BaseModel):
    """Throughput distribution of one (group, R) cell of the report."""

    group: str
    robots: int
    flagged_only: bool = False
    trials: int = Field(ge=1)
    max: float
    q75: float
    median: float
    q25: float
    min: float
    mean: float
    improvement_pct: float | None = None
    predicted_error: float | None = None
