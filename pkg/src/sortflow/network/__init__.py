"""Layouts and the heading-expanded flow network."""

from sortflow.network.generator import PlacementInfeasible, generate_standard_layout
from sortflow.network.graph import (
    Arc,
    ArcKind,
    Commodity,
    Direction,
    DisconnectedCommodity,
    FlowNetwork,
    Node,
    NodeKind,
    build_flow_network,
)
from sortflow.network.layout import (
    HEADING_ORDER,
    CellSpec,
    Demand,
    DropOff,
    Heading,
    InvariantViolation,
    Layout,
    LayoutError,
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

__all__ = [
    "HEADING_ORDER",
    "Arc",
    "ArcKind",
    "CellSpec",
    "Commodity",
    "Demand",
    "Direction",
    "DisconnectedCommodity",
    "DropOff",
    "FlowNetwork",
    "Heading",
    "InvariantViolation",
    "Layout",
    "LayoutError",
    "LayoutSyntaxError",
    "Node",
    "NodeKind",
    "Ordinary",
    "PlacementInfeasible",
    "UnreachableElement",
    "Void",
    "Workstation",
    "build_flow_network",
    "generate_standard_layout",
    "parse_demand",
    "parse_layout",
    "serialize_demand",
    "serialize_layout",
]
