"""Stochastic oracles for checking the delay model against simulation.

Two small simulators live here:

``simulate_mg1``
    Single-server FIFO queue with Poisson arrivals, computed with the
    Lindley recursion in closed vectorised form.  Used to check the M/G/1
    workstation delay.

``simulate_corridor``
    Event-driven micro-simulation (``simpy``) of robots crossing a straight
    corridor of unit-capacity cells.  Each cell is held from the moment a
    robot starts entering it until the robot has fully moved into the next
    cell, exactly as the delay model assumes.  The run measures, per cell,
    the mean blocking wait, the mean occupancy time and the fraction of
    arrivals that found the cell busy.
"""

from __future__ import annotations

from collections.abc import Generator
from dataclasses import dataclass
from typing import Any

import numpy as np
import simpy

from sortflow.delay.cost import TimingParams
from sortflow.network.graph import FloatArray


def _service_times(timing: TimingParams, n: int, rng: np.random.Generator) -> FloatArray:
    mean, second = timing.t_load, timing.load_second_moment
    variance = second - mean**2
    if variance <= 1e-12 * mean**2:
        return np.full(n, mean)
    # Gamma with matching first two moments.
    shape = mean**2 / variance
    return rng.gamma(shape, mean / shape, size=n)


def simulate_mg1(
    arrival_rate: float, timing: TimingParams, n_arrivals: int, seed: int
) -> float:
    """Return the mean sojourn time (wait plus loading) of an M/G/1 queue.

    Parameters
    ----------
    arrival_rate:
        Poisson arrival rate; ``arrival_rate * t_load`` must be below 1.
    timing:
        Supplies the loading-time moments (deterministic when the second
        moment equals the squared mean).
    n_arrivals:
        Number of customers to simulate.
    seed:
        Seed of the random stream.
    """
    if arrival_rate * timing.t_load >= 1.0:
        raise ValueError("queue is unstable at this arrival rate")
    rng = np.random.default_rng(seed)
    service = _service_times(timing, n_arrivals, rng)
    gaps = rng.exponential(1.0 / arrival_rate, size=n_arrivals)
    # Lindley: W_n = X_n - min_{k<=n} X_k, X the partial sums of S_{k-1} - A_k.
    steps = np.concatenate(([0.0], service[:-1] - gaps[1:]))
    walk = np.cumsum(steps)
    waits = walk - np.minimum.accumulate(np.minimum(walk, 0.0))
    return float(np.mean(waits + service))


@dataclass(frozen=True)
class CorridorStats:
    """Per-cell measurements from :func:`simulate_corridor`.

    Attributes
    ----------
    mean_wait:
        Mean time between requesting and being granted each cell.
    mean_occupancy:
        Mean time each cell is held by one robot.
    busy_fraction:
        Fraction of requests that found the cell held.
    robots:
        Number of robots that completed the corridor.
    """

    mean_wait: FloatArray
    mean_occupancy: FloatArray
    busy_fraction: FloatArray
    robots: int


def simulate_corridor(
    rate: float,
    timing: TimingParams,
    cells: int = 5,
    robots: int = 50_000,
    seed: int = 0,
    turn_fraction: float = 0.0,
) -> CorridorStats:
    """Simulate robots crossing a straight corridor, injected at Poisson *rate*.

    A robot requests cell 0, spends ``t1`` moving in, then requests the
    next cell; it releases a cell once it has completed the move into the
    following one.  With probability *turn_fraction* a robot turns in the
    last cell (``t2``) before leaving.

    Returns
    -------
    CorridorStats
        Measurements for each of the *cells* cells.
    """
    env = simpy.Environment()
    lanes = [simpy.Resource(env, capacity=1) for _ in range(cells)]
    rng = np.random.default_rng(seed)
    waits = np.zeros(cells)
    held = np.zeros(cells)
    busy = np.zeros(cells)
    done = [0]

    def robot(turns: bool) -> Generator[Any, Any, None]:
        previous: tuple[int, Any, float] | None = None
        for j, lane in enumerate(lanes):
            requested = env.now
            if lane.count:
                busy[j] += 1
            request = lane.request()
            yield request
            waits[j] += env.now - requested
            granted = env.now
            yield env.timeout(timing.t1)
            if previous is not None:
                k, prev_request, since = previous
                lanes[k].release(prev_request)
                held[k] += env.now - since
            previous = (j, request, granted)
        if turns:
            yield env.timeout(timing.t2)
        yield env.timeout(timing.t1)
        assert previous is not None
        k, prev_request, since = previous
        lanes[k].release(prev_request)
        held[k] += env.now - since
        done[0] += 1

    def source() -> Generator[Any, Any, None]:
        for _ in range(robots):
            yield env.timeout(float(rng.exponential(1.0 / rate)))
            env.process(robot(bool(rng.random() < turn_fraction)))

    env.process(source())
    env.run()
    n = max(done[0], 1)
    return CorridorStats(
        mean_wait=waits / n,
        mean_occupancy=held / n,
        busy_fraction=busy / n,
        robots=done[0],
    )
