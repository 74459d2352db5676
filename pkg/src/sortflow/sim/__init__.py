"""Discrete-time multi-robot simulator with pluggable dispatch policies."""

from sortflow.sim.engine import Accuracy, measured_flow, predicted_vs_measured, simulate
from sortflow.sim.planner import FreeFlowRouter, NoPathWithinHorizon, TimedPath, ca_star_plan
from sortflow.sim.policies import (
    Assignment,
    ParcelArrived,
    Policy,
    RobotFreed,
    ZoneMap,
    build_zone_map,
    make_policy,
    policy_flow_guided,
    policy_random,
    policy_zoning,
)
from sortflow.sim.state import (
    Metrics,
    ReservationTable,
    Robot,
    RobotMode,
    SafetyViolation,
    SimState,
    TickTiming,
    WaitForGraph,
    check_invariants,
)
from sortflow.sim.traffic import detect_resolve_deadlocks, traffic_control_step

__all__ = [
    "Accuracy",
    "Assignment",
    "FreeFlowRouter",
    "Metrics",
    "NoPathWithinHorizon",
    "ParcelArrived",
    "Policy",
    "ReservationTable",
    "Robot",
    "RobotFreed",
    "RobotMode",
    "SafetyViolation",
    "SimState",
    "TickTiming",
    "TimedPath",
    "WaitForGraph",
    "ZoneMap",
    "build_zone_map",
    "ca_star_plan",
    "check_invariants",
    "detect_resolve_deadlocks",
    "make_policy",
    "measured_flow",
    "policy_flow_guided",
    "policy_random",
    "policy_zoning",
    "predicted_vs_measured",
    "simulate",
    "traffic_control_step",
]
