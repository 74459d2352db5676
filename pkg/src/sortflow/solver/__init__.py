"""Frank-Wolfe solver for the system-optimal flow."""

from sortflow.solver.frank_wolfe import (
    InfeasibleDemand,
    SolverConfig,
    SolveTrace,
    TraceRow,
    all_or_nothing,
    frank_wolfe,
    line_search,
    shortest_routes,
)

__all__ = [
    "InfeasibleDemand",
    "SolveTrace",
    "SolverConfig",
    "TraceRow",
    "all_or_nothing",
    "frank_wolfe",
    "line_search",
    "shortest_routes",
]
