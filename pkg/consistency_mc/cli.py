"""Command-line runner: simulate, check, oracle and convergence subcommands.

Exit codes: 0 success, 2 scenario/usage/market error, 3 numerical abort or missing channel,
4 a check failed, 5 a check was inconclusive (and none failed).
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .checks import FAIL, INCONCLUSIVE, CheckReport, check_martingale, run_checks
from .env import get_dump_paths, get_log_level, load_env_config
from .exceptions import (
    AssumptionViolation,
    EstimatorError,
    MissingChannelError,
    NumericalAbort,
    OracleError,
    ScenarioError,
)
from .manifest import RunManifest, load_manifest
from .paths import write_channel_dump
from .preferences import StateDepExp
from .scenario import ScenarioSpec, load_scenario, scenario_document, validate_assumptions
from .static_oracle import FiniteMarket, oracle_report, parse_oracle_utility
from .strategies import MIN_LADDER, convergence_study, simulate_scenario, wealth_model


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_FAIL = 4
EXIT_INCONCLUSIVE = 5


class UsageError(ScenarioError):
    """Bad command-line arguments."""


def configure_logging() -> None:
    logging.basicConfig(
        level=getattr(logging, get_log_level(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def _floats(text: Optional[str], flag: str) -> List[float]:
    if not text:
        return []
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"{flag} expects a comma-separated list of numbers, got {text!r}") from e


def _write_json(path: Path, doc: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote {path}")
    return path


def _load(args: argparse.Namespace) -> ScenarioSpec:
    if not args.scenario:
        raise UsageError("--scenario is required for this subcommand")
    spec = load_scenario(args.scenario)
    return spec.with_overrides(seed=args.seed, n_paths=args.paths)


def _manifest(args: argparse.Namespace) -> RunManifest:
    overrides = {k: v for k, v in (("seed", args.seed), ("n_paths", args.paths)) if v is not None}
    return RunManifest(subcommand=args.command, output_dir=str(args.out), tool_version=__version__,
                       scenario_path=getattr(args, "scenario", None), overrides=overrides)


def _write_summary(args: argparse.Namespace, out: Path, doc: Dict[str, Any],
                   manifest: Optional[Dict[str, Any]] = None) -> Path:
    """Write summary.json, keeping the manifest of the run it replaces."""
    path = out / "summary.json"
    previous = load_manifest(path)
    summary = {"manifest": manifest or _manifest(args).to_dict(), **doc}
    if previous is not None:
        logger.info(f"Replacing the {previous.subcommand} run of "
                    f"{previous.started_at:%Y-%m-%d %H:%M:%S} UTC in {out}")
        summary["previous_run"] = previous.to_dict()
    return _write_json(path, summary)


def cmd_simulate(args: argparse.Namespace) -> int:
    """Simulate the scenario, dump channels for the first paths and summarise the martingale batteries."""
    spec = _load(args)
    out = Path(args.out)
    assumptions = validate_assumptions(spec)
    dump = simulate_scenario(spec, n_paths=min(get_dump_paths(), spec.n_paths))
    model = None
    if spec.eta is not None or not isinstance(spec.utility, StateDepExp):
        model = wealth_model(spec)
        dump = model.fill(dump)
        dump = dump.with_channels(exposure_star=model.optimal_exposure(dump))
    write_channel_dump(dump, out / "channels.csv")

    batteries = [check_martingale(spec, "Z", "P")]
    if model is not None:
        batteries.append(check_martingale(spec, "xi_star", "Q"))
        if isinstance(spec.utility, StateDepExp):
            batteries.append(check_martingale(spec, "gamma_inv", "Q"))
            batteries.append(check_martingale(spec, "u_xi_star", "P"))
    else:
        batteries.append(check_martingale(spec, "u_V_star", "P"))
    summary = {
        "scenario": scenario_document(spec),
        "assumptions": assumptions.to_dict(),
        "estimates": [r.to_dict() for r in batteries],
    }
    if model is not None and model.constants is not None:
        grid = spec.grid
        indices = sorted({0} | {grid.index_of(u) for pair in spec.check_times for u in pair})
        summary["constants"] = model.constants.to_dict(indices)
    _write_summary(args, out, summary)
    return EXIT_OK


def _write_details(out: Path, report: CheckReport, index: int) -> Optional[str]:
    if not report.details:
        return None
    name = f"{report.name.replace(':', '_')}_{index}.csv"
    columns = list(report.details)
    rows = np.column_stack([np.asarray(report.details[c], dtype=float) for c in columns])
    out.mkdir(parents=True, exist_ok=True)
    with (out / name).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
    return name


def exit_code(reports: Sequence[CheckReport]) -> int:
    verdicts = {r.verdict for r in reports}
    if FAIL in verdicts:
        return EXIT_FAIL
    if INCONCLUSIVE in verdicts:
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    """Run the requested checks and write report.json; the exit code encodes the verdicts."""
    spec = _load(args)
    out = Path(args.out)
    names = [n.strip() for n in args.checks.split(",") if n.strip()] if args.checks else None
    reports = run_checks(spec, names)
    documents = []
    for index, report in enumerate(reports):
        doc = report.to_dict()
        detail = _write_details(out, report, index)
        if detail:
            doc["diagnostics"]["detail_file"] = detail
        documents.append(doc)
    manifest = _manifest(args).to_dict()
    _write_json(out / "report.json", {"manifest": manifest, "reports": documents})
    code = exit_code(reports)
    _write_summary(args, out, {
        "scenario": scenario_document(spec), "exit_code": code,
        "verdicts": {r.name: r.verdict for r in reports}}, manifest=manifest)
    for report in reports:
        logger.info(f"{report.name}: {report.verdict}")
    return code


def cmd_oracle(args: argparse.Namespace) -> int:
    """Solve a finite market, compare with brute force and print the result as JSON."""
    if not args.market:
        raise UsageError("--market is required for the oracle subcommand")
    market = FiniteMarket.from_json(Path(args.market))
    gammas = _floats(args.gamma, "--gamma")
    family = parse_oracle_utility(args.utility, gammas[0] if len(gammas) == 1 else (gammas or None))
    report = oracle_report(market, family)
    report["utility"] = {"family": args.utility, "gamma": gammas}
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        _write_summary(args, Path(args.out), {"oracle": report})
    return EXIT_OK


def cmd_convergence(args: argparse.Namespace) -> int:
    """RMS terminal replication error per step size, with the fitted order, to convergence.csv."""
    ladder = _floats(args.dt_ladder, "--dt-ladder")
    if len(ladder) < MIN_LADDER:
        raise UsageError(f"--dt-ladder needs at least {MIN_LADDER} step sizes, got {len(ladder)}")
    spec = _load(args)
    out = Path(args.out)
    rows, order = convergence_study(spec, ladder, strategy=args.strategy)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "convergence.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dt", "n_steps", "rms_error", "rms_se"])
        for row in rows:
            writer.writerow([repr(row.dt), row.n_steps, repr(row.rms_error), repr(row.rms_se)])
    _write_summary(args, out, {
        "scenario": scenario_document(spec),
        "strategy": args.strategy, "order": order, "rows": [r.to_dict() for r in rows]})
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "check": cmd_check,
    "oracle": cmd_oracle,
    "convergence": cmd_convergence,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consistency_mc",
                                     description="Monte Carlo consistency and forward-performance certificates")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__doc__.splitlines()[0])
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="override sim.seed")
        p.add_argument("--paths", type=int, help="override sim.n_paths")
        if name != "oracle":
            p.add_argument("--scenario", help="scenario JSON file")
    sub.choices["check"].add_argument("--checks", help="comma-separated check names")
    convergence = sub.choices["convergence"]
    convergence.add_argument("--dt-ladder", dest="dt_ladder", help="comma-separated step sizes")
    convergence.add_argument("--strategy", choices=("optimal", "zero"), default="optimal")
    oracle = sub.choices["oracle"]
    oracle.add_argument("--market", help="finite market JSON file")
    oracle.add_argument("--utility", choices=("exponential", "power", "log"), default="exponential")
    oracle.add_argument("--gamma", help="risk aversion, or one per state for exponential utility")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_env_config()
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, AssumptionViolation, OracleError) as e:
        logger.error(f"{args.command} aborted: {e}")
        return EXIT_USAGE
    except (NumericalAbort, EstimatorError, MissingChannelError) as e:
        logger.error(f"{args.command} hit a numerical abort: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
