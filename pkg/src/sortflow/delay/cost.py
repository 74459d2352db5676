"""Approximate total-cost objective over link flows, and its gradient.

A robot entering cell *j* waits while *j* is occupied.  The time a robot
occupies a cell depends on what it does there: ``2*T1`` passing straight
through, ``2*T1 + T2`` turning, ``2*T1 + T_drop`` dropping a parcel.  With
``v1, v2, v3`` the through, turning and dropping flow of *j* and ``G_j`` the
categorical occupancy time with those weights, the expected wait on an
arrival arc ``i -> j`` is::

    E[S_ij] = (v_j / 2) * E[G_j^2] + sum_k (v_kj / 2) * E[G_k] * E[G_j]

where *k* ranges over the other approaches feeding *j* (robots that may
claim *j* first).  Workstations are M/G/1 servers: a load arc carrying *v*
costs ``E[T_load] + v * E[T_load^2] / (2 * (1 - v * E[T_load]))``.

The objective is ``TC(v) = sum_a v_a * c_a(v)`` with forward and backward
flow sharing every physical arc.

Design notes
------------
- All per-cell and per-approach aggregates are sparse products with the
  network's :class:`~sortflow.network.graph.CellIncidence` maps, so one
  evaluation is a handful of vector operations.
- ``E[G_j]`` uses the probabilistic definition ``sum_l (v_l / v_j) * g_l``;
  a cell without arrivals has zero delay.
- The gradient is the exact chain rule through the cell aggregates, the
  approach flows and the ``E[G]`` ratios of both the cell and its
  competing approaches.
- A workstation approach (robots leaving a workstation onto the cell) is
  treated as a straight-through neighbour with ``E[G] = 2*T1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from sortflow.network.graph import ArcKind, Direction, FloatArray, FlowNetwork

#: Utilisation margin below 1 at which a workstation counts as saturated.
EPS_SATURATION: float = 1e-6

# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class SaturatedWorkstation(ValueError):
    """Raised when a workstation's utilisation reaches ``1 - EPS_SATURATION``.

    Attributes
    ----------
    workstation:
        Workstation id (``0`` when evaluating a bare load value).
    utilization:
        ``v * E[T_load]`` at the offending flow.
    """

    def __init__(self, workstation: int, utilization: float) -> None:
        super().__init__(f"workstation W{workstation} saturated (utilization {utilization:.6f})")
        self.workstation = workstation
        self.utilization = utilization


# ---------------------------------------------------------------------------
# Parameters and flows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimingParams:
    """Operation times in time-step units.

    Attributes
    ----------
    t1:
        Time to move one cell.
    t2:
        Time for an in-place 90-degree turn.
    t_load, t_load_sq:
        Mean and second moment of the loading time.  ``t_load_sq`` defaults
        to ``t_load ** 2`` (deterministic loading).
    t_drop, t_drop_sq:
        Mean and second moment of the dropping time.
    """

    t1: float = 1.0
    t2: float = 4.0
    t_load: float = 3.0
    t_drop: float = 1.0
    t_load_sq: float | None = None
    t_drop_sq: float | None = None

    def __post_init__(self) -> None:
        for name in ("t1", "t2", "t_load", "t_drop"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive, got {value!r}")
        if self.t_load_sq is None:
            object.__setattr__(self, "t_load_sq", self.t_load**2)
        if self.t_drop_sq is None:
            object.__setattr__(self, "t_drop_sq", self.t_drop**2)
        if self.load_second_moment < self.t_load**2 * (1 - 1e-12):
            raise ValueError("t_load_sq must be >= t_load ** 2")
        if self.drop_second_moment < self.t_drop**2 * (1 - 1e-12):
            raise ValueError("t_drop_sq must be >= t_drop ** 2")

    @property
    def load_second_moment(self) -> float:
        assert self.t_load_sq is not None
        return self.t_load_sq

    @property
    def drop_second_moment(self) -> float:
        assert self.t_drop_sq is not None
        return self.t_drop_sq

    @property
    def occupancy_means(self) -> tuple[float, float, float]:
        """Mean cell occupancy for through, turning and dropping robots."""
        base = 2 * self.t1
        return base, base + self.t2, base + self.t_drop

    @property
    def occupancy_second_moments(self) -> tuple[float, float, float]:
        """Second moments of the three occupancy times."""
        base = 2 * self.t1
        return (
            base**2,
            (base + self.t2) ** 2,
            base**2 + 2 * base * self.t_drop + self.drop_second_moment,
        )

    @property
    def c_g(self) -> float:
        """Worst-case single-robot occupancy, ``max(T2 + 2*T1, T_drop + 2*T1)``."""
        return max(self.t2 + 2 * self.t1, self.t_drop + 2 * self.t1)


@dataclass(frozen=True)
class LinkFlow:
    """Arc flows split into forward (loaded) and backward (empty) classes.

    Sign is not enforced here so that finite-difference checks can step
    below zero; use :func:`conservation_residual` to check feasibility.
    """

    forward: FloatArray
    backward: FloatArray

    def __post_init__(self) -> None:
        if self.forward.shape != self.backward.shape or self.forward.ndim != 1:
            raise ValueError("forward and backward flows must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(self.forward)) and np.all(np.isfinite(self.backward))):
            raise ValueError("link flows must be finite")

    @classmethod
    def zeros(cls, network: FlowNetwork) -> LinkFlow:
        return cls(np.zeros(network.n_arcs), np.zeros(network.n_arcs))

    @cached_property
    def total(self) -> FloatArray:
        """Total flow per arc; both classes share physical arcs."""
        return self.forward + self.backward

    def toward(self, target: LinkFlow, alpha: float) -> LinkFlow:
        """Return the convex combination ``(1 - alpha) * self + alpha * target``."""
        return LinkFlow(
            (1.0 - alpha) * self.forward + alpha * target.forward,
            (1.0 - alpha) * self.backward + alpha * target.backward,
        )

    def is_nonnegative(self) -> bool:
        return bool(np.all(self.forward >= 0.0) and np.all(self.backward >= 0.0))


@dataclass(frozen=True)
class CostVector:
    """Arc costs and objective gradient at one link flow."""

    cost: FloatArray
    gradient: FloatArray


@dataclass(frozen=True)
class CellComposition:
    """Flow classes through one cell and the flow of each approach into it.

    ``approaches`` is keyed by the approach's location label (``r3c4`` for a
    cell, ``W1`` for a workstation).
    """

    through: float
    turning: float
    dropping: float
    approaches: dict[str, float]

    @property
    def total(self) -> float:
        return self.through + self.turning + self.dropping


# ---------------------------------------------------------------------------
# Shared evaluation
# ---------------------------------------------------------------------------


class _Evaluation:
    """Intermediate aggregates of one objective evaluation."""

    def __init__(self, network: FlowNetwork, flow: LinkFlow, timing: TimingParams) -> None:
        if flow.forward.shape != (network.n_arcs,):
            raise ValueError(
                f"link flow has {flow.forward.shape[0]} arcs, network has {network.n_arcs}"
            )
        inc = network.cell_incidence
        x = flow.total
        g1, g2, g3 = timing.occupancy_means
        q1, q2, q3 = timing.occupancy_second_moments

        self.network = network
        self.timing = timing
        self.x = x
        self.arr = inc.arrival @ x
        self.v2 = inc.turn @ x
        self.v3 = inc.drop @ x
        self.v1 = self.arr - self.v2 - self.v3
        self.p = g1 * self.v1 + g2 * self.v2 + g3 * self.v3
        self.q = q1 * self.v1 + q2 * self.v2 + q3 * self.v3
        self.has_flow = self.arr != 0.0
        safe = np.where(self.has_flow, self.arr, 1.0)
        self.inv_arr = np.where(self.has_flow, 1.0 / safe, 0.0)
        self.m = self.p * self.inv_arr

        self.u = inc.approach @ x
        src = inc.group_source
        self.mk = np.where(src >= 0, self.m[np.maximum(src, 0)], g1)
        self.z = inc.group_to_cell @ (self.u * self.mk)
        self.w = inc.group_to_cell @ (self.u**2 * self.mk)

        self.load_arcs = network.arcs_of(ArcKind.LOAD)
        self.load_v = x[self.load_arcs]
        rho = self.load_v * timing.t_load
        over = rho >= 1.0 - EPS_SATURATION
        if np.any(over):
            k = int(np.flatnonzero(over)[0])
            ws = network.nodes[network.arcs[int(self.load_arcs[k])].head].ident
            raise SaturatedWorkstation(ws, float(rho[k]))
        self.one_minus_rho = 1.0 - rho

    @cached_property
    def arrival_delay(self) -> FloatArray:
        """Expected wait ``E[S]`` on every arc (zero off arrival arcs)."""
        inc = self.network.cell_incidence
        out = np.zeros(self.network.n_arcs)
        arcs = np.flatnonzero(inc.group_of_arc >= 0)
        g = inc.group_of_arc[arcs]
        j = inc.group_cell[g]
        competing = self.z[j] - self.u[g] * self.mk[g]
        out[arcs] = 0.5 * self.q[j] + 0.5 * self.m[j] * competing
        return out

    @cached_property
    def load_cost(self) -> FloatArray:
        t = self.timing
        return t.t_load + self.load_v * t.load_second_moment / (2.0 * self.one_minus_rho)

    @cached_property
    def costs(self) -> FloatArray:
        t = self.timing
        out = self.arrival_delay.copy()
        fixed = {
            ArcKind.MOVE: t.t1,
            ArcKind.DEPART: t.t1,
            ArcKind.ENTRY: t.t1,
            ArcKind.TURN: t.t2,
            ArcKind.DROP: t.t_drop,
        }
        for kind, value in fixed.items():
            out[self.network.arcs_of(kind)] += value
        out[self.load_arcs] = self.load_cost
        return out

    def total(self) -> float:
        return float(self.x @ self.costs)

    def gradient(self) -> FloatArray:
        inc = self.network.cell_incidence
        t = self.timing
        g1, g2, g3 = t.occupancy_means
        q1, q2, q3 = t.occupancy_second_moments
        arr, m, u, mk = self.arr, self.m, self.u, self.mk
        j = inc.group_cell

        # dF/dM per cell: own term plus its role as a competing approach.
        as_source = 0.5 * m[j] * u * (arr[j] - u)
        d_m = 0.5 * (arr * self.z - self.w) + inc.source_to_cell @ as_source

        dm_darr = (g1 * arr - self.p) * self.inv_arr**2
        dm_dv2 = (g2 - g1) * self.inv_arr
        dm_dv3 = (g3 - g1) * self.inv_arr

        d_arr = t.t1 + 0.5 * self.q + 0.5 * arr * q1 + 0.5 * m * self.z + d_m * dm_darr
        d_v2 = 0.5 * arr * (q2 - q1) + d_m * dm_dv2
        d_v3 = 0.5 * arr * (q3 - q1) + d_m * dm_dv3
        d_u = 0.5 * m[j] * mk * (arr[j] - 2.0 * u)

        grad = (
            inc.arrival.T @ d_arr
            + inc.turn.T @ d_v2
            + inc.drop.T @ d_v3
            + inc.approach.T @ d_u
        )
        grad[self.network.arcs_of(ArcKind.TURN)] += t.t2
        grad[self.network.arcs_of(ArcKind.DROP)] += t.t_drop
        grad[self.network.arcs_of(ArcKind.ENTRY)] += t.t1
        slope = t.load_second_moment / (2.0 * self.one_minus_rho**2)
        grad[self.load_arcs] = self.load_cost + self.load_v * slope
        return np.asarray(grad, dtype=np.float64)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def _row_dot(matrix: sp.csr_matrix, row: int, x: FloatArray) -> float:
    return float((matrix[row] @ x)[0])


def cell_composition(network: FlowNetwork, flow: LinkFlow, cell: int) -> CellComposition:
    """Split the flow through *cell* into through, turning and dropping parts.

    Parameters
    ----------
    network:
        The flow network.
    flow:
        Link flow matching *network*.
    cell:
        Row-major cell index.

    Returns
    -------
    CellComposition
        ``through + turning + dropping`` equals the arrival flow into the
        cell; ``approaches`` holds the arrival flow from each neighbour.
    """
    inc = network.cell_incidence
    x = flow.total
    arrivals = _row_dot(inc.arrival, cell, x)
    turning = _row_dot(inc.turn, cell, x)
    dropping = _row_dot(inc.drop, cell, x)
    approaches: dict[str, float] = {}
    for g in np.flatnonzero(inc.group_cell == cell):
        src = int(inc.group_source[g])
        if src >= 0:
            r, c = divmod(src, max(network.cols, 1))
            key = f"r{r}c{c}"
        else:
            arc = int(np.flatnonzero(inc.group_of_arc == g)[0])
            key = network.label(network.arcs[arc].tail)
        approaches[key] = _row_dot(inc.approach, int(g), x)
    return CellComposition(arrivals - turning - dropping, turning, dropping, approaches)


def expected_cell_delay(
    network: FlowNetwork, flow: LinkFlow, arc: int, timing: TimingParams
) -> float:
    """Return the expected blocking wait ``E[S_ij]`` on arrival arc *arc*.

    Raises
    ------
    ValueError
        If *arc* is not a move or depart arc into a cell.
    """
    if network.cell_incidence.group_of_arc[arc] < 0:
        raise ValueError(f"arc {arc} ({network.arcs[arc].kind.value}) does not enter a cell")
    return float(_Evaluation(network, flow, timing).arrival_delay[arc])


def mg1_delay(v: float, timing: TimingParams, workstation: int = 0) -> float:
    """Return the M/G/1 sojourn time at a workstation loading *v* parcels per step.

    Raises
    ------
    SaturatedWorkstation
        If ``v * E[T_load] >= 1 - EPS_SATURATION``.
    """
    rho = v * timing.t_load
    if rho >= 1.0 - EPS_SATURATION:
        raise SaturatedWorkstation(workstation, rho)
    return timing.t_load + v * timing.load_second_moment / (2.0 * (1.0 - rho))


def workstation_delay(
    network: FlowNetwork, flow: LinkFlow, workstation: int, timing: TimingParams
) -> float:
    """Return the expected time spent at *workstation* (queueing plus loading)."""
    arc = network.load_arcs[workstation]
    return mg1_delay(float(flow.total[arc]), timing, workstation)


def arc_costs(network: FlowNetwork, flow: LinkFlow, timing: TimingParams) -> FloatArray:
    """Return the cost ``c_a(v)`` of every arc at *flow*."""
    return _Evaluation(network, flow, timing).costs.copy()


def total_cost(network: FlowNetwork, flow: LinkFlow, timing: TimingParams) -> float:
    """Return ``TC = sum_a v_a * c_a(v)``, robot-time spent per time step.

    Raises
    ------
    SaturatedWorkstation
        If any workstation is at or beyond saturation.
    """
    return _Evaluation(network, flow, timing).total()


def cost_gradient(network: FlowNetwork, flow: LinkFlow, timing: TimingParams) -> CostVector:
    """Return arc costs and ``dTC/dv_a`` for every arc.

    At zero flow the gradient equals the free-flow arc costs.

    Raises
    ------
    SaturatedWorkstation
        If any workstation is at or beyond saturation.
    """
    ev = _Evaluation(network, flow, timing)
    return CostVector(cost=ev.costs.copy(), gradient=ev.gradient())


def approximation_error_bound(
    network: FlowNetwork, flow: LinkFlow, timing: TimingParams, robots: int
) -> FloatArray:
    """Return the per-arc additive bound on the blocking-wait approximation error.

    For an arrival arc ``i -> j`` the bound is ``max(v_p, v_q) * R^2 * C_G^2``
    where ``p, q`` are the cells reachable from *j* by one move; other arcs
    get zero.
    """
    if robots < 0:
        raise ValueError("robot count must be >= 0")
    inc = network.cell_incidence
    throughput = inc.arrival @ flow.total
    worst_downstream = np.array(
        [max((throughput[d] for d in inc.downstream[c]), default=0.0) for c in range(inc.n_cells)]
    )
    out = np.zeros(network.n_arcs)
    arcs = np.flatnonzero(inc.group_of_arc >= 0)
    cells = inc.group_cell[inc.group_of_arc[arcs]]
    out[arcs] = worst_downstream[cells] * robots**2 * timing.c_g**2
    return out


def conservation_residual(network: FlowNetwork, flow: LinkFlow) -> float:
    """Return the largest violation of flow conservation or demand.

    Checks, for each class separately, node imbalance against the signed
    demand at ``S``/``T`` and the flow on every drop-off's exit arc against
    that drop-off's demand.  Negative arc flows count as violations too.
    """
    worst = 0.0
    for direction, values in ((Direction.FORWARD, flow.forward), (Direction.BACKWARD, flow.backward)):
        imbalance = network.incidence @ values - network.expected_imbalance(direction)
        worst = max(worst, float(np.max(np.abs(imbalance), initial=0.0)))
        worst = max(worst, float(-np.min(values, initial=0.0)))
        for d_id, demand in network.commodity_demands(direction).items():
            node = network.dropoff_node(d_id)
            key = (node, network.sink) if direction is Direction.FORWARD else (network.sink, node)
            worst = max(worst, abs(float(values[network.arc_index[key]]) - demand))
    return worst


def turning_flow(network: FlowNetwork, flow: LinkFlow) -> FloatArray:
    """Return the per-cell turning flow as a ``rows x cols`` grid."""
    per_cell = network.cell_incidence.turn @ flow.total
    grid = np.zeros(network.rows * network.cols)
    grid[: per_cell.shape[0]] = per_cell[: grid.shape[0]]
    return grid.reshape(network.rows, network.cols)
