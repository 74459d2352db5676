"""Delay model: arc costs, total cost, gradient and simulation oracles."""

from sortflow.delay.cost import (
    EPS_SATURATION,
    CellComposition,
    CostVector,
    LinkFlow,
    SaturatedWorkstation,
    TimingParams,
    approximation_error_bound,
    arc_costs,
    cell_composition,
    conservation_residual,
    cost_gradient,
    expected_cell_delay,
    mg1_delay,
    total_cost,
    turning_flow,
    workstation_delay,
)
from sortflow.delay.oracles import CorridorStats, simulate_corridor, simulate_mg1

__all__ = [
    "EPS_SATURATION",
    "CellComposition",
    "CorridorStats",
    "CostVector",
    "LinkFlow",
    "SaturatedWorkstation",
    "TimingParams",
    "approximation_error_bound",
    "arc_costs",
    "cell_composition",
    "conservation_residual",
    "cost_gradient",
    "expected_cell_delay",
    "mg1_delay",
    "simulate_corridor",
    "simulate_mg1",
    "total_cost",
    "turning_flow",
    "workstation_delay",
]
