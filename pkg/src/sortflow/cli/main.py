"""Command-line entry point for sortflow.

Usage::

    sortflow validate-layout --config experiment.toml
    sortflow solve --config experiment.toml --lambda 0.1
    sortflow decompose --config experiment.toml
    sortflow simulate --config experiment.toml --policies flow random --robots 20 --trials 10
    sortflow report --config experiment.toml --include-flagged

Every verb reads one experiment configuration (``--config``, else defaults
plus ``SORTFLOW_*`` environment variables), applies the command-line
overrides and writes under ``--out`` (default: ``output_dir``).

Exit codes: 0 success; 1 configuration, layout or missing-file errors;
2 infeasible inputs (saturated workstations, disconnected drop-offs);
3 anything else.  Failures print one diagnostic line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from sortflow import __version__
from sortflow.cli.pipeline import Pipeline, describe_offline
from sortflow.config import ConfigError, DemandSection, ExperimentConfig, SimulationSection, get_config, load_config
from sortflow.delay.cost import SaturatedWorkstation
from sortflow.network.generator import PlacementInfeasible
from sortflow.network.graph import DisconnectedCommodity, build_flow_network
from sortflow.network.layout import Demand, LayoutError, parse_layout
from sortflow.solver.frank_wolfe import InfeasibleDemand
from sortflow.store.artifacts import ArtifactError, read_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2
EXIT_INTERNAL = 3

_CONFIG_ERRORS = (ConfigError, LayoutError, PlacementInfeasible, ValidationError, ArtifactError, FileNotFoundError)
_INFEASIBLE_ERRORS = (InfeasibleDemand, DisconnectedCommodity, SaturatedWorkstation)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Load the configuration and apply command-line overrides.

    Raises
    ------
    ConfigError
        If the file is missing or invalid, or an override fails validation.
    """
    config = load_config(args.config) if args.config is not None else get_config()
    updates: dict[str, Any] = {}
    sim: dict[str, Any] = {}
    for flag, key in (
        ("policies", "policies"),
        ("robots", "robots"),
        ("trials", "trials"),
        ("seed_base", "seed_base"),
        ("ticks", "ticks"),
        ("workers", "workers"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            sim[key] = value
    lam = getattr(args, "lam", None)
    if lam is not None:
        sim["lambdas"] = [lam]
        updates["demand"] = _validated(DemandSection, {**config.demand.model_dump(), "lam": lam, "path": None})
    if sim:
        updates["simulation"] = _validated(SimulationSection, {**config.simulation.model_dump(), **sim})
    if args.out is not None:
        updates["output_dir"] = args.out
    return config.model_copy(update=updates) if updates else config


def _validated(model: Any, data: dict[str, Any]) -> Any:
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def cmd_validate_layout(args: argparse.Namespace, config: ExperimentConfig) -> int:
    """Print n_W, n_D, |V| and |A| of the layout."""
    if args.layout is not None:
        layout = parse_layout(Path(args.layout).read_text(encoding="utf-8"))
    else:
        layout = Pipeline(config).layout
    network = build_flow_network(layout, Demand.uniform(layout.dropoff_ids, 0.0))
    print(
        f"workstations={len(layout.workstation_ids)} dropoffs={len(layout.dropoff_ids)} "
        f"nodes={network.n_nodes} arcs={network.n_arcs}"
    )
    return EXIT_OK


def cmd_solve(args: argparse.Namespace, config: ExperimentConfig) -> int:
    """Solve the system-optimal flow and write solution and trace files."""
    pipeline = Pipeline(config)
    key, _network, _flow = pipeline.solve(getattr(args, "lam", None))
    trace = read_trace(pipeline.store.trace_path(key))
    last = trace[-1]
    print(f"key={key} iterations={last.iteration} tc={last.tc!r} residual={last.residual:.3e}")
    print(pipeline.store.solution_path(key))
    return EXIT_OK


def cmd_decompose(args: argparse.Namespace, config: ExperimentConfig) -> int:
    """Solve if needed, then write the path-flow file."""
    pipeline = Pipeline(config)
    offline = pipeline.decompose(getattr(args, "lam", None))
    print(describe_offline(offline))
    print(pipeline.store.pathflow_path(offline.key))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, config: ExperimentConfig) -> int:
    """Run the trial battery and write one metrics file per trial."""
    records = Pipeline(config).simulate()
    flagged = sum(r.flagged for r in records)
    print(f"trials={len(records)} flagged={flagged} out={config.output_dir}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, config: ExperimentConfig) -> int:
    """Summarise stored trials into report files and print the summary."""
    pipeline = Pipeline(config)
    rows = pipeline.report(include_flagged=args.include_flagged, metrics_dir=args.metrics)
    print("group,robots,flagged_only,trials,mean,median,improvement_pct")
    for r in rows:
        improvement = "" if r.improvement_pct is None else f"{r.improvement_pct:.2f}"
        print(f"{r.group},{r.robots},{r.flagged_only},{r.trials},{r.mean:.4f},{r.median:.4f},{improvement}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser factory
# ---------------------------------------------------------------------------


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="experiment TOML file")
    parser.add_argument("--out", type=Path, default=None, help="output directory")


def _offline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lambda", dest="lam", type=float, default=None, help="uniform total demand")


def build_parser() -> argparse.ArgumentParser:
    """Create the argument parser with one sub-command per verb."""
    parser = argparse.ArgumentParser(prog="sortflow", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbs = parser.add_subparsers(dest="verb", required=True)

    p = verbs.add_parser("validate-layout", help="check a layout and print its size")
    _common(p)
    p.add_argument("layout", nargs="?", default=None, help="layout file (default: from config)")
    p.set_defaults(func=cmd_validate_layout)

    p = verbs.add_parser("solve", help="compute the system-optimal link flow")
    _common(p)
    _offline_flags(p)
    p.set_defaults(func=cmd_solve)

    p = verbs.add_parser("decompose", help="recover path flows from the solution")
    _common(p)
    _offline_flags(p)
    p.set_defaults(func=cmd_decompose)

    p = verbs.add_parser("simulate", help="run the trial battery")
    _common(p)
    _offline_flags(p)
    p.add_argument("--policies", nargs="+", default=None, choices=["flow", "random", "zoning"])
    p.add_argument("--robots", nargs="+", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed-base", dest="seed_base", type=int, default=None)
    p.add_argument("--ticks", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = verbs.add_parser("report", help="summarise stored trials")
    _common(p)
    p.add_argument("--metrics", type=Path, default=None, help="directory of metrics records")
    p.add_argument("--include-flagged", dest="include_flagged", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI; return the process exit code."""
    args = build_parser().parse_args(argv)
    func: Callable[[argparse.Namespace, ExperimentConfig], int] = args.func
    try:
        config = resolve_config(args)
        logging.basicConfig(
            level=config.log_level,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        return func(args, config)
    except _CONFIG_ERRORS as exc:
        print(f"sortflow: error: {exc}".splitlines()[0], file=sys.stderr)
        return EXIT_CONFIG
    except _INFEASIBLE_ERRORS as exc:
        print(f"sortflow: infeasible: {exc}".splitlines()[0], file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # noqa: BLE001
        logger.debug("Unhandled failure", exc_info=True)
        print(f"sortflow: internal error: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
