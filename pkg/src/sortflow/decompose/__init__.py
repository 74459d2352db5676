"""Path-flow decomposition and split tables."""

from sortflow.decompose.paths import (
    FLOW_FLOOR,
    MissingDirection,
    PathFlow,
    PathFlowTable,
    ResidualCycleWarning,
    ResidualGraph,
    SplitOptions,
    SplitTable,
    StrandedWalk,
    build_split_table,
    decompose_flow,
    follow_path,
    recompose,
)

__all__ = [
    "FLOW_FLOOR",
    "MissingDirection",
    "PathFlow",
    "PathFlowTable",
    "ResidualCycleWarning",
    "ResidualGraph",
    "SplitOptions",
    "SplitTable",
    "StrandedWalk",
    "build_split_table",
    "decompose_flow",
    "follow_path",
    "recompose",
]
