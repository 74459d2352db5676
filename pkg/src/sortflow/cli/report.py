"""Summary statistics over trial records.

Trials are grouped by (group, R).  Each group gets the throughput
distribution (max, q75, median, q25, min, mean) and, for every group other
than the ``random`` baseline, the paired relative improvement: each trial
is paired with one randomly chosen baseline trial at the same R and the
percentage gains are averaged.  Flagged trials (unresolvable deadlocks)
are left out of the main rows and summarised separately unless asked for.
"""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from collections.abc import Sequence

import numpy as np
import numpy.typing as npt
from scipy.stats import spearmanr

from sortflow.store.models import MetricsRecord, SummaryRow

logger = logging.getLogger(__name__)

#: Group every other group is compared with.
BASELINE_GROUP: str = "random"

#: Seed of the pairing draw.
PAIRING_SEED: int = 0


class EmptyGroup(UserWarning):
    """Warning issued when a group has no trials left to summarise."""


def describe(values: Sequence[float]) -> dict[str, float]:
    """Return max, q75, median, q25, min and mean of *values*."""
    arr = np.asarray(values, dtype=np.float64)
    q25, median, q75 = np.percentile(arr, [25, 50, 75])
    return {
        "max": float(arr.max()),
        "q75": float(q75),
        "median": float(median),
        "q25": float(q25),
        "min": float(arr.min()),
        "mean": float(arr.mean()),
    }


def paired_improvement(
    values: Sequence[float], baseline: Sequence[float], rng: np.random.Generator
) -> float:
    """Mean percentage gain of *values* over randomly paired *baseline* trials."""
    base = np.asarray(baseline, dtype=np.float64)
    picks = base[rng.integers(len(base), size=len(values))]
    if np.any(picks <= 0.0):
        return float("nan")
    return float(np.mean((np.asarray(values) - picks) / picks) * 100.0)


def _predicted_error(records: Sequence[MetricsRecord]) -> float | None:
    errors = [
        (r.predicted_tc - r.measured_tc) / r.measured_tc
        for r in records
        if r.predicted_tc is not None and r.measured_tc
    ]
    return float(np.mean(errors)) if errors else None


def summarize(records: Sequence[MetricsRecord], include_flagged: bool = False) -> list[SummaryRow]:
    """Build the report rows for *records*.

    Parameters
    ----------
    records:
        Trial records, any order.
    include_flagged:
        Count flagged trials in the main rows instead of apart.

    Returns
    -------
    list[SummaryRow]
        Main rows sorted by (group, R), then rows for flagged trials.
    """
    groups: dict[tuple[str, int], list[MetricsRecord]] = defaultdict(list)
    for r in records:
        groups[(r.group, r.robots)].append(r)

    main: dict[tuple[str, int], list[MetricsRecord]] = {}
    flagged: dict[tuple[str, int], list[MetricsRecord]] = {}
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda r: r.seed)
        kept = members if include_flagged else [r for r in members if not r.flagged]
        dropped = [] if include_flagged else [r for r in members if r.flagged]
        if kept:
            main[key] = kept
        else:
            message = f"group {key[0]} at R={key[1]} has no unflagged trials"
            logger.warning("%s", message)
            warnings.warn(message, EmptyGroup, stacklevel=2)
        if dropped:
            flagged[key] = dropped

    rng = np.random.default_rng(PAIRING_SEED)
    rows = []
    for (group, robots), members in main.items():
        values = [r.throughput for r in members]
        baseline = main.get((BASELINE_GROUP, robots))
        improvement = None
        if group != BASELINE_GROUP and baseline:
            improvement = paired_improvement(values, [r.throughput for r in baseline], rng)
        rows.append(
            SummaryRow(
                group=group,
                robots=robots,
                trials=len(members),
                improvement_pct=improvement,
                predicted_error=_predicted_error(members),
                **describe(values),
            )
        )
    for (group, robots), members in flagged.items():
        rows.append(
            SummaryRow(
                group=group,
                robots=robots,
                flagged_only=True,
                trials=len(members),
                **describe([r.throughput for r in members]),
            )
        )
    return rows


def turning_correlation(optimal: npt.ArrayLike, simulated: npt.ArrayLike) -> float:
    """Spearman correlation over cells where the optimal turning flow is positive.

    Returns ``nan`` when fewer than two such cells exist or either side is
    constant.
    """
    opt = np.asarray(optimal, dtype=np.float64).ravel()
    sim = np.asarray(simulated, dtype=np.float64).ravel()
    if opt.shape != sim.shape:
        raise ValueError(f"grids differ in size: {opt.shape} vs {sim.shape}")
    mask = opt > 0.0
    if np.count_nonzero(mask) < 2 or np.ptp(opt[mask]) == 0.0 or np.ptp(sim[mask]) == 0.0:
        return float("nan")
    rho = spearmanr(opt[mask], sim[mask]).statistic
    return float(rho)
