"""Offline/online pipeline: solve, decompose, simulate, report.

:class:`Pipeline` binds an :class:`~sortflow.config.ExperimentConfig` to an
:class:`~sortflow.store.ArtifactStore`.  Offline results are cached under a
content hash of (layout, demand, timing, solver settings), so a λ sweep
solves each λ once and later runs reuse the files.

Design notes
------------
- Trials are independent: each worker rebuilds the network and split
  table from picklable inputs and returns its metrics.  Only the parent
  process writes files, one per trial, after all trials finish.
- ``simulation.workers == 1`` runs trials in-process.
- Flow-guided trials are grouped as ``flow@<lambda>``; other policies by
  name.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from collections.abc import Iterator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

from sortflow.cli.report import summarize, turning_correlation
from sortflow.config import ExperimentConfig
from sortflow.decompose.paths import PathFlowTable, SplitTable, build_split_table, decompose_flow
from sortflow.delay.cost import LinkFlow, TimingParams, turning_flow
from sortflow.network.generator import generate_standard_layout
from sortflow.network.graph import FlowNetwork, build_flow_network
from sortflow.network.layout import Demand, Layout, parse_layout, serialize_demand, serialize_layout
from sortflow.sim.engine import predicted_vs_measured, simulate
from sortflow.sim.state import Metrics
from sortflow.solver.frank_wolfe import SolveTrace, frank_wolfe
from sortflow.store.artifacts import ArtifactStore, content_hash, read_matrix, write_matrix
from sortflow.store.models import MetricsRecord, SummaryRow

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Offline:
    """Solved and decomposed flow for one demand."""

    key: str
    lam: float
    network: FlowNetwork
    flow: LinkFlow
    pathflows: PathFlowTable


@dataclass(frozen=True)
class TrialSpec:
    """Everything one worker needs to run a trial."""

    group: str
    policy: str
    lam: float | None
    key: str
    layout: Layout
    demand: Demand
    timing: TimingParams
    robots: int
    ticks: int
    seed: int
    warmup_fraction: float
    check_invariants: bool
    pathflows: PathFlowTable | None


def _split_for(pathflows: PathFlowTable, demand: Demand) -> SplitTable:
    required = [d for d, v in demand.per_dropoff.items() if v > 0]
    return build_split_table(pathflows, required=required)


def run_trial(spec: TrialSpec) -> tuple[Metrics, float]:
    """Run one trial; return its metrics and the predicted total cost."""
    network = build_flow_network(spec.layout, spec.demand)
    split = _split_for(spec.pathflows, spec.demand) if spec.pathflows is not None else None
    metrics = simulate(
        spec.layout,
        spec.policy,
        spec.timing,
        spec.robots,
        spec.ticks,
        spec.seed,
        split_table=split,
        network=network,
        check_invariants=spec.check_invariants,
        warmup_fraction=spec.warmup_fraction,
    )
    accuracy = predicted_vs_measured(network, metrics, spec.timing)
    return metrics, accuracy.predicted


class Pipeline:
    """The experiment described by *config*, writing under *store*."""

    def __init__(self, config: ExperimentConfig, store: ArtifactStore | None = None) -> None:
        self.config = config
        self.store = store or ArtifactStore(config.output_dir)

    # -- inputs -------------------------------------------------------------

    @cached_property
    def layout(self) -> Layout:
        section = self.config.layout
        if section.path is not None:
            return parse_layout(section.path.read_text(encoding="utf-8"))
        return generate_standard_layout(
            section.rows, section.cols, section.workstations, section.dropoffs, section.seed
        )

    @cached_property
    def timing(self) -> TimingParams:
        return self.config.timing.to_params()

    def demand(self, lam: float | None = None) -> Demand:
        return self.config.demand.build(self.layout.dropoff_ids, lam)

    def offline_key(self, demand: Demand) -> str:
        """Content hash of the inputs that determine the offline solution."""
        return content_hash(
            serialize_layout(self.layout),
            serialize_demand(demand),
            self.config.timing.model_dump_json(),
            self.config.solver.model_dump_json(),
        )

    # -- offline ------------------------------------------------------------

    def solve(self, lam: float | None = None) -> tuple[str, FlowNetwork, LinkFlow]:
        """Solve for *lam* (default: the configured demand), reusing cached files.

        Raises
        ------
        InfeasibleDemand
            If the demand saturates the workstations.
        DisconnectedCommodity
            If a drop-off cannot be served.
        """
        demand = self.demand(lam)
        key = self.offline_key(demand)
        network = build_flow_network(self.layout, demand)
        if self.store.has_solution(key):
            logger.info("Reusing cached solution %s", key)
            return key, network, self.store.load_solution(key, network)
        logger.info("Solving λ=%.4g (%s)", demand.total, key)
        flow, trace = frank_wolfe(network, None, self.timing, self.config.solver.to_config())
        self._save_solve(key, network, flow, trace)
        return key, network, flow

    def _save_solve(self, key: str, network: FlowNetwork, flow: LinkFlow, trace: SolveTrace) -> None:
        self.store.save_solution(key, network, flow, trace)
        write_matrix(self.store.turning_flow_path(key), turning_flow(network, flow))

    def decompose(self, lam: float | None = None) -> Offline:
        """Solve if needed, then recover (or reload) the path flows."""
        key, network, flow = self.solve(lam)
        demand = self.demand(lam)
        if self.store.has_pathflows(key):
            table = self.store.load_pathflows(key, network)
        else:
            rng = np.random.default_rng(self.config.solver.seed)
            table = decompose_flow(network, flow, rng)
            self.store.save_pathflows(key, network, table)
        return Offline(key, demand.total, network, flow, table)

    # -- online -------------------------------------------------------------

    def trial_specs(self) -> Iterator[TrialSpec]:
        sim = self.config.simulation
        base_demand = self.demand()
        base_key = content_hash(serialize_layout(self.layout), self.config.timing.model_dump_json())
        for policy in sorted(set(sim.policies)):
            if policy == "flow":
                variants = []
                for lam in sim.lambdas:
                    offline = self.decompose(lam)
                    variants.append((f"flow@{lam:g}", lam, offline.key, self.demand(lam), offline.pathflows))
            else:
                variants = [(policy, None, base_key, base_demand, None)]
            for group, lam, key, demand, pathflows in variants:
                for robots in sim.robots:
                    for seed in sim.trial_seeds:
                        yield TrialSpec(
                            group=group,
                            policy=policy,
                            lam=lam,
                            key=key,
                            layout=self.layout,
                            demand=demand,
                            timing=self.timing,
                            robots=robots,
                            ticks=sim.ticks,
                            seed=seed,
                            warmup_fraction=sim.warmup_fraction,
                            check_invariants=sim.check_invariants,
                            pathflows=pathflows,
                        )

    def simulate(self) -> list[MetricsRecord]:
        """Run the whole trial battery and write metrics and heatmaps."""
        specs = list(self.trial_specs())
        logger.info("Running %d trials", len(specs))
        workers = self.config.simulation.workers
        if workers == 1:
            results = [run_trial(s) for s in specs]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run_trial, specs))

        records = []
        heat: dict[tuple[str, int], list[Metrics]] = defaultdict(list)
        for spec, (metrics, predicted) in zip(specs, results):
            record = MetricsRecord.from_metrics(metrics, spec.key, spec.group, spec.lam, predicted)
            self.store.save_metrics(record)
            records.append(record)
            heat[(spec.group, spec.robots)].append(metrics)
        for (group, robots), runs in sorted(heat.items()):
            self.store.save_heatmaps(
                group,
                robots,
                np.mean([m.turning for m in runs], axis=0),
                np.mean([m.traversal for m in runs], axis=0),
            )
        return records

    # -- report -------------------------------------------------------------

    def report(self, include_flagged: bool = False, metrics_dir: Path | None = None) -> list[SummaryRow]:
        """Summarise stored trials and write the report files."""
        records = self.store.load_metrics(metrics_dir)
        rows = summarize(records, include_flagged)
        extra: dict[str, Any] = {"turning_correlation": self._correlations(records)}
        self.store.save_report(rows, extra)
        return rows

    def _correlations(self, records: list[MetricsRecord]) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        seen = sorted({(r.group, r.robots, r.config_hash) for r in records if r.policy == "flow"})
        for group, robots, key in seen:
            optimal_path = self.store.turning_flow_path(key)
            simulated_path = self.store.trial_dir(group, robots) / "turning.csv"
            if not (optimal_path.is_file() and simulated_path.is_file()):
                continue
            rho = turning_correlation(read_matrix(optimal_path), read_matrix(simulated_path))
            out[f"{group}/R{robots}"] = None if np.isnan(rho) else rho
        return out


def describe_offline(offline: Offline) -> str:
    """One-line JSON summary of an offline result, for the CLI."""
    return json.dumps(
        {"key": offline.key, "lambda": offline.lam, "paths": len(offline.pathflows)}, sort_keys=True
    )

