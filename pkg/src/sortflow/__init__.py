"""sortflow: system-optimal robot flows for grid sorting systems.

This package models a robotic sorting floor as a multi-commodity flow
network, solves for the system-optimal link flows, decomposes them into
paths, and uses those paths to dispatch robots in a tick-based simulator.
"""

__version__ = "0.1.0"
__all__: list[str] = []
