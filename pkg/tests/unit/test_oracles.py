"""Tests for sortflow.delay.oracles.

Covers:
    - simulate_mg1 against the closed-form workstation delay.
    - simulate_corridor occupancy times at low load, with and without a
      final turn.
    - The blocking-wait approximation against a corridor at moderate load
      (slow).
"""

from __future__ import annotations

import numpy as np
import pytest

from sortflow.delay.cost import TimingParams, mg1_delay
from sortflow.delay.oracles import simulate_corridor, simulate_mg1

_TIMING = TimingParams(t1=1.0, t2=4.0, t_load=3.0, t_drop=1.0)


class TestMg1Oracle:
    @pytest.mark.parametrize("rate", [0.05, 0.1, 0.2])
    def test_matches_closed_form(self, rate: float) -> None:
        measured = simulate_mg1(rate, _TIMING, n_arrivals=200_000, seed=0)
        assert measured == pytest.approx(mg1_delay(rate, _TIMING), rel=0.03)

    def test_random_service_times(self) -> None:
        timing = TimingParams(t_load=3.0, t_load_sq=12.0)
        measured = simulate_mg1(0.1, timing, n_arrivals=200_000, seed=1)
        assert measured == pytest.approx(mg1_delay(0.1, timing), rel=0.05)

    def test_unstable_rate(self) -> None:
        with pytest.raises(ValueError, match="unstable"):
            simulate_mg1(0.5, _TIMING, n_arrivals=10, seed=0)

    def test_same_seed_same_result(self) -> None:
        a = simulate_mg1(0.1, _TIMING, n_arrivals=1000, seed=5)
        b = simulate_mg1(0.1, _TIMING, n_arrivals=1000, seed=5)
        assert a == b


class TestCorridorOracle:
    def test_low_load_occupancy(self) -> None:
        stats = simulate_corridor(0.01, _TIMING, cells=5, robots=2000, seed=0)
        assert stats.robots == 2000
        np.testing.assert_allclose(stats.mean_occupancy, 2.0, atol=0.05)
        assert np.all(stats.mean_wait < 0.05)
        assert np.all(stats.busy_fraction < 0.05)

    def test_final_turn_lengthens_last_cell(self) -> None:
        stats = simulate_corridor(0.01, _TIMING, cells=3, robots=1000, seed=0, turn_fraction=1.0)
        assert stats.mean_occupancy[-1] == pytest.approx(6.0, abs=0.1)
        assert stats.mean_occupancy[0] == pytest.approx(2.0, abs=0.1)

    @pytest.mark.slow
    def test_entrance_wait_matches_model(self) -> None:
        rate = 0.05
        stats = simulate_corridor(rate, _TIMING, cells=5, robots=50_000, seed=0)
        # Single through approach: E[S] = v * E[G^2] / 2.
        predicted = 0.5 * rate * _TIMING.occupancy_second_moments[0]
        assert predicted == pytest.approx(0.1)
        assert stats.mean_wait[0] == pytest.approx(predicted, rel=0.2)
