"""Command-line surface: sample, cov-check, extremes, dyson-check, geometry, intensity, report."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from membrane.biharmonic import SolverMode
from membrane.errors import InsufficientDataError, QuadratureError, ReplicateError, SolverConvergenceError
from membrane.extremes import extract_extremal_process, standard_bump, write_point_process_csv
from membrane.field_io import write_field
from membrane.harness import (
    CONSTANTS,
    DEFAULT_GEOMETRY_C,
    DEFAULT_INTENSITY_THRESHOLD,
    FIELDS,
    EstimatorResult,
    ExperimentConfig,
    ReplicateRunner,
    build_results_document,
    write_results_document,
)
from helpers.experiments import ExperimentHelper, extremes_summary
from utils.config import load_config_file, load_environment, master_seed
from utils.logger import logger
from utils.schema_validator import SchemaValidator

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_SOLVER = 3
EXIT_IO = 4

COMMANDS = ("sample", "cov-check", "extremes", "dyson-check", "geometry", "intensity", "report")
GEOMETRY_CSV_HEADER = "r,upper,probability,std_error,replicates"


class UsageError(ValueError):
    """Flag combination rejected before any computation."""


def _error_line(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose failures print usage plus one JSON error line"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        _error_line("usage", message)
        raise SystemExit(EXIT_USAGE)


def _add_common(parser: argparse.ArgumentParser, experiment: bool = True) -> None:
    parser.add_argument("--config", type=str, default=None, help="YAML file of flag defaults; explicit flags win")
    parser.add_argument("--out", type=str, default="results", help="Output directory")
    if not experiment:
        return
    parser.add_argument("--seed", type=int, default=None, help="64-bit master seed (fallback: MBR4_SEED)")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="Replicate worker threads")
    parser.add_argument("--solver", choices=[m.value for m in SolverMode], default=None,
                        help="Force a solver tier for membrane fields")
    parser.add_argument("--reps", type=int, default=100, help="Number of replicates")
    parser.add_argument("--record-timing", action="store_true", help="Write wall times into results JSON")


def _add_size(parser: argparse.ArgumentParser, field: bool = True) -> None:
    if field:
        parser.add_argument("--field", choices=FIELDS, default="membrane")
    parser.add_argument("--n-side", type=int, default=None, help="Lattice side N")
    parser.add_argument("--depth", type=int, default=None, help="Dyadic depth n (N = 2^n)")


def build_parser() -> Tuple[CliParser, Dict[str, CliParser]]:
    parser = CliParser(prog="membrane", description="4D membrane model extremes laboratory")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)
    commands = {}

    p = subparsers.add_parser("sample", help="Persist sampled fields in the MBR4 binary format")
    _add_size(p)
    _add_common(p)
    p.set_defaults(reps=1)
    commands["sample"] = p

    p = subparsers.add_parser("cov-check", help="Empirical covariances against exact values")
    _add_size(p)
    p.add_argument("--pairs", type=int, default=20)
    _add_common(p)
    p.set_defaults(reps=5000)
    commands["cov-check"] = p

    p = subparsers.add_parser("extremes", help="Extremal process CSVs and summary statistics")
    _add_size(p)
    p.add_argument("--r", type=int, default=2, help="Local-maximum radius")
    p.add_argument("--lambda", dest="lam", type=float, default=2.0, help="Level-set depth below m_N")
    p.add_argument("--ell", type=int, default=4, help="Number of top values summed")
    p.add_argument("--norm", choices=["linf", "l2"], default="linf", help="Pair distance norm")
    _add_common(p)
    p.set_defaults(reps=1)
    commands["extremes"] = p

    p = subparsers.add_parser("dyson-check", help="Laplace functional of f against f_t")
    _add_size(p, field=False)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--lambda", dest="lam", type=float, default=2.0)
    p.add_argument("--bump-amplitude", type=float, default=1.0)
    p.add_argument("--bump-center", type=float, default=0.0)
    p.add_argument("--bump-halfwidth", type=float, default=2.0)
    _add_common(p)
    commands["dyson-check"] = p

    p = subparsers.add_parser("geometry", help="Probability of distant near-maximal pairs per r")
    _add_size(p)
    p.add_argument("--r-values", type=int, nargs="+", default=[3, 4, 6])
    p.add_argument("--c", type=float, default=DEFAULT_GEOMETRY_C)
    p.add_argument("--norm", choices=["linf", "l2"], default="linf")
    _add_common(p)
    commands["geometry"] = p

    p = subparsers.add_parser("intensity", help="Exponential rate of local-maximum excesses")
    _add_size(p)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--threshold", type=float, default=DEFAULT_INTENSITY_THRESHOLD)
    _add_common(p)
    commands["intensity"] = p

    p = subparsers.add_parser("report", help="Markdown summary of results JSON files")
    p.add_argument("inputs", nargs="+", help="Results JSON files")
    _add_common(p, experiment=False)
    p.set_defaults(out="report.md")
    commands["report"] = p

    return parser, commands


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse flags, then re-parse with --config values as defaults so explicit flags win"""
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args

    values = load_config_file(args.config)
    subparser = commands[args.command]
    known = {action.dest for action in subparser._actions}
    unknown = sorted(set(values) - known - {"config"})
    if unknown:
        subparser.error(f"unknown keys in {args.config}: {', '.join(unknown)}")
    subparser.set_defaults(**values)
    return parser.parse_args(argv)


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    """Validated ExperimentConfig from parsed flags"""
    names = {f for f in ExperimentConfig.__dataclass_fields__}
    fields = {k: v for k, v in vars(args).items() if k in names and v is not None}
    fields["experiment"] = args.command
    if "r_values" in fields:
        fields["r_values"] = tuple(fields["r_values"])
    if args.command == "dyson-check":
        fields["field"] = "membrane"
    try:
        fields["seed"] = master_seed(args.seed)
        return ExperimentConfig(**fields)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def _emit(document: Dict[str, Any], path: Path) -> Path:
    validator = SchemaValidator()
    if not validator.validate_document(document):
        raise RuntimeError(f"{document['experiment']} document violates its schema: {validator.get_errors()}")
    return write_results_document(document, path)


def _finite(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


def _wall_time(runner: ReplicateRunner, config: ExperimentConfig) -> Optional[float]:
    return runner.last_wall_time if config.record_timing else None


def _summary_entries(rows: List[Dict[str, Any]], seed: int) -> List[Dict[str, Any]]:
    entries = []
    for name in rows[0]:
        values = [row[name] for row in rows if row[name] is not None]
        if len(values) >= 2:
            entries.append(EstimatorResult.from_samples(values, seed).to_entry(name))
        else:
            value = float(values[0]) if values else None
            entries.append({"name": name, "value": value, "std_error": None, "replicates": len(values)})
    return entries


def command_sample(config: ExperimentConfig, args: argparse.Namespace, runner: ReplicateRunner) -> List[Path]:
    out = Path(config.out)
    fields = runner.collect(config, lambda h: h)
    return [
        write_field(h, out / f"{config.field}_N{config.side}_rep{i:04d}.mbr4")
        for i, h in enumerate(fields)
    ]


def command_cov_check(config: ExperimentConfig, args: argparse.Namespace, runner: ReplicateRunner) -> List[Path]:
    rows = ExperimentHelper(runner).covariance_check(config)
    estimates = [
        {"name": f"cov[{list(row.u)}|{list(row.v)}]", "value": row.empirical,
         "std_error": row.std_error, "replicates": row.replicates}
        for row in rows
    ]
    details = {
        "pairs": [
            {"u": list(row.u), "v": list(row.v), "empirical": row.empirical, "std_error": row.std_error,
             "oracle": row.oracle, "z_score": _finite(row.z_score)}
            for row in rows
        ],
        "max_abs_z": _finite(max(abs(row.z_score) for row in rows)),
    }
    document = build_results_document("cov-check", config, estimates, _wall_time(runner, config), details)
    return [_emit(document, Path(config.out) / "cov_check.json")]


def command_extremes(config: ExperimentConfig, args: argparse.Namespace, runner: ReplicateRunner) -> List[Path]:
    out = Path(config.out)
    written = []
    summaries = []
    atoms = []
    for i, h in enumerate(runner.collect(config, lambda h: h)):
        written.append(write_field(h, out / f"field_rep{i:04d}.mbr4"))
        pp = extract_extremal_process(h, config.r)
        written.append(write_point_process_csv(pp, out / f"pp_rep{i:04d}.csv"))
        summaries.append(extremes_summary(h, config))
        atoms.append(len(pp))
    details = {"replicates": summaries, "atoms": atoms}
    document = build_results_document(
        "extremes", config, _summary_entries(summaries, config.seed), _wall_time(runner, config), details
    )
    written.append(_emit(document, out / "extremes.json"))
    return written


def command_dyson_check(config: ExperimentConfig, args: argparse.Namespace, runner: ReplicateRunner) -> List[Path]:
    f = standard_bump(args.bump_amplitude, args.bump_center, args.bump_halfwidth)
    comparison = ExperimentHelper(runner).dyson_experiment(config, f)
    estimates = [
        comparison.lhs.to_entry("lhs"),
        comparison.rhs.to_entry("rhs"),
        comparison.interpolated.to_entry("interpolated"),
        comparison.level_set_inclusion.to_entry("level_set_inclusion"),
    ]
    details = {
        "gap": comparison.gap,
        "combined_se": comparison.combined_se,
        "t": comparison.t,
        "bump": {"amplitude": args.bump_amplitude, "center": args.bump_center, "halfwidth": args.bump_halfwidth},
    }
    document = build_results_document("dyson-check", config, estimates, _wall_time(runner, config), details)
    return [_emit(document, Path(config.out) / "dyson_check.json")]


def command_geometry(config: ExperimentConfig, args: argparse.Namespace, runner: ReplicateRunner) -> List[Path]:
    out = Path(config.out)
    results = ExperimentHelper(runner).geometry_experiment(config)
    table = np.array([
        [r, config.side / r, result.estimate, result.std_error, result.replicates]
        for r, result in results.items()
    ])
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "geometry.csv"
    np.savetxt(csv_path, table, delimiter=",", header=GEOMETRY_CSV_HEADER, comments="", fmt="%.12g")
    logger.info(f"Geometry table written to {csv_path}")

    estimates = [result.to_entry(f"P_violation[r={r}]") for r, result in results.items()]
    document = build_results_document("geometry", config, estimates, _wall_time(runner, config))
    return [csv_path, _emit(document, out / "geometry.json")]


def command_intensity(config: ExperimentConfig, args: argparse.Namespace, runner: ReplicateRunner) -> List[Path]:
    fit, pooled = ExperimentHelper(runner).intensity_experiment(config)
    estimates = [{"name": "rate", "value": fit.rate, "std_error": fit.std_error, "replicates": config.reps}]
    details = {
        "exceedances": fit.exceedances,
        "pooled_maxima": pooled,
        "threshold": fit.threshold,
        "target_rate": CONSTANTS["intensity_rate"],
    }
    document = build_results_document("intensity", config, estimates, _wall_time(runner, config), details)
    return [_emit(document, Path(config.out) / "intensity.json")]


def _format(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def render_report(documents: Sequence[Dict[str, Any]]) -> str:
    """Markdown summary of results documents, in the given order"""
    lines = ["# Membrane laboratory report", ""]
    for document in documents:
        config = document["config"]
        lines += [
            f"## {document['experiment']}",
            "",
            f"- field: {config.get('field')}, N = {config.get('n_side')}, replicates = {config.get('reps')}",
            f"- seed: {document['seed']}",
            f"- revision: {document['git_describe']}",
            "",
            "| estimate | value | std. error | replicates |",
            "|---|---|---|---|",
        ]
        for entry in document["estimates"]:
            lines.append(
                f"| {entry['name']} | {_format(entry['value'])} | "
                f"{_format(entry['std_error'])} | {entry['replicates']} |"
            )
        constants = ", ".join(f"{k} = {_format(v)}" for k, v in document["constants"].items())
        lines += ["", f"Constants: {constants}", ""]
    return "\n".join(lines)


def command_report(args: argparse.Namespace) -> List[Path]:
    validator = SchemaValidator()
    documents = []
    for path in args.inputs:
        with open(path, "r") as f:
            document = json.load(f)
        if not validator.validate_document(document):
            raise UsageError(f"{path} is not a valid results document: {validator.get_errors()}")
        documents.append(document)
    target = Path(args.out)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(render_report(documents))
    logger.info(f"Report written to {target}")
    return [target]


HANDLERS: Dict[str, Callable[[ExperimentConfig, argparse.Namespace, ReplicateRunner], List[Path]]] = {
    "sample": command_sample,
    "cov-check": command_cov_check,
    "extremes": command_extremes,
    "dyson-check": command_dyson_check,
    "geometry": command_geometry,
    "intensity": command_intensity,
}


def _execute(args: argparse.Namespace) -> List[Path]:
    if args.command == "report":
        return command_report(args)
    config = experiment_config(args)
    runner = ReplicateRunner(config.threads)
    return HANDLERS[args.command](config, args, runner)


def _run_command(args: argparse.Namespace) -> int:
    logger.info(f"Command '{args.command}' started")
    try:
        written = _execute(args)
    except UsageError as e:
        logger.error(f"Invalid arguments: {str(e)}")
        _error_line("usage", str(e))
        return EXIT_USAGE
    except (SolverConvergenceError, QuadratureError) as e:
        _error_line("solver", str(e))
        return EXIT_SOLVER
    except ReplicateError as e:
        _error_line("replicate", str(e))
        return EXIT_SOLVER
    except InsufficientDataError as e:
        logger.error(f"Not enough data: {str(e)}")
        _error_line("insufficient-data", str(e))
        return EXIT_SOLVER
    except OSError as e:
        logger.error(f"I/O failure: {str(e)}")
        _error_line("io", str(e))
        return EXIT_IO
    except Exception as e:
        logger.error(f"Command '{args.command}' failed: {str(e)}")
        _error_line("internal", str(e))
        return EXIT_INTERNAL

    for path in written:
        print(path)
    logger.info(f"Command '{args.command}' finished, {len(written)} artifact(s)")
    return EXIT_OK


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command and map failures to exit codes

    Returns:
        0 on success, 1 for internal errors, 2 for invalid flags, 3 for solver, replicate
        or insufficient-data failures, 4 for I/O failures
    """
    load_environment()
    try:
        args = parse_arguments(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except OSError as e:
        logger.error(f"Cannot read config: {str(e)}")
        _error_line("io", str(e))
        return EXIT_IO
    except (ValueError, yaml.YAMLError) as e:
        logger.error(f"Invalid config: {str(e)}")
        _error_line("usage", str(e))
        return EXIT_USAGE

    with logger.command(args.command):
        return _run_command(args)


def main() -> None:
    sys.exit(run())
