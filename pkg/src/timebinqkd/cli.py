"""Command-line entry point: ``timebinqkd {run,sweep,calibrate,compare}``.

Exit status is 0 when every requested point completed, 1 when some point or
the output failed, and 2 for invalid arguments or configuration.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from dataclasses import replace

from .config import ConfigError, ExperimentConfig, SweepSpec, load_config, load_targets, parse_config
from .report import COMPARISON_COLUMNS, compare_protocols, emit_report, format_records, run_sweep, write_text

logger = logging.getLogger("timebinqkd")

CALIBRATION_COLUMNS = ("protocol", "dark_count_rate", "intrinsic_error_Z", "intrinsic_error_X",
                       "max_qber_residual", "cutoff_db", "adequate")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--format", choices=("csv", "json"), default=None, help="output format (default csv)")
    p.add_argument("--out", metavar="PATH", help="write the report here instead of stdout")
    p.add_argument("--seed", type=int, help="base seed for Monte Carlo blocks")
    p.add_argument("--monte-carlo", action="store_true", help="simulate blocks instead of using expected tallies")
    p.add_argument("--workers", type=int, default=None, help="parallel worker processes")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timebinqkd", description="Time-bin QKD key-rate simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="evaluate the points of a config file (empty/no file: reference points)")
    p.add_argument("config", nargs="?", help="YAML experiment config")
    p.add_argument("--optimize", action="store_true", help="grid-optimise mu1, mu2 and p_Z_bob per point")
    _common(p)

    p = sub.add_parser("sweep", help="optimised SKR over a range of channel losses")
    p.add_argument("--config", help="YAML config supplying defaults")
    p.add_argument("--from-db", type=float, default=0.0)
    p.add_argument("--to-db", type=float, default=45.0)
    p.add_argument("--step-db", type=float, default=0.5)
    p.add_argument("--protocol", choices=("2D", "4D", "both"), default="both")
    p.add_argument("--no-optimize", action="store_true", help="keep the reference intensities instead")
    _common(p)

    p = sub.add_parser("calibrate", help="fit dark counts and intrinsic errors to measured error rates")
    p.add_argument("--targets", help="YAML targets file (default: the reference error rates)")
    p.add_argument("--protocol", choices=("2D", "4D", "both"), default="both")
    p.add_argument("--no-cutoff", action="store_true", help="ignore the key cutoff loss in the fit")
    _common(p)

    p = sub.add_parser("compare", help="SKR enhancement of 4D over 2D at shared losses")
    p.add_argument("config", nargs="?", help="YAML experiment config (default: reference points)")
    p.add_argument("--optimize", action="store_true")
    _common(p)
    return parser


def _experiment(args, path) -> ExperimentConfig:
    cfg = load_config(path) if path else parse_config("")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.monte_carlo:
        changes["monte_carlo"] = True
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        changes["workers"] = args.workers
    if getattr(args, "optimize", False):
        changes["optimize"] = True
    return replace(cfg, **changes)


def _emit(text: str, args, cfg: ExperimentConfig | None = None):
    path = args.out or (cfg.output_path if cfg is not None else None)
    if path:
        write_text(text, path)
    else:
        sys.stdout.write(text)


def _fmt(args, cfg: ExperimentConfig | None = None) -> str:
    return args.format or (cfg.output_format if cfg is not None else "csv")


def cmd_run(args) -> int:
    cfg = _experiment(args, args.config)
    table = run_sweep(cfg)
    _emit(emit_report(table, _fmt(args, cfg)), args, cfg)
    return 0 if table.complete else 1


def cmd_sweep(args) -> int:
    if args.step_db <= 0:
        raise ConfigError("step_db", "must be > 0")
    if args.from_db < 0 or args.to_db < 0:
        raise ConfigError("from_db", "losses must be >= 0")
    cfg = _experiment(args, args.config)
    protos = ("2D", "4D") if args.protocol == "both" else (args.protocol,)
    cfg = replace(cfg, points=(), sweep=SweepSpec(protos, args.from_db, args.to_db, args.step_db),
                  optimize=not args.no_optimize)
    table = run_sweep(cfg)
    _emit(emit_report(table, _fmt(args, cfg)), args, cfg)
    return 0 if table.complete else 1


def cmd_calibrate(args) -> int:
    from .calibration import calibrate_noise

    if args.targets:
        proto, targets, cutoff = load_targets(args.targets)
        jobs = [(proto, targets, None if args.no_cutoff else cutoff)]
    else:
        protos = ("2D", "4D") if args.protocol == "both" else (args.protocol,)
        jobs = [(p, None, None if args.no_cutoff else "auto") for p in protos]
    records = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # inadequacy is reported in the output instead
        for proto, targets, cutoff in jobs:
            res = calibrate_noise(targets, proto, cutoff_db=cutoff)
            rec = res.to_dict()
            rec["max_qber_residual"] = res.max_qber_residual
            records.append(rec)
    _emit(format_records(records, CALIBRATION_COLUMNS, _fmt(args)), args)
    return 0 if all(r["adequate"] for r in records) else 1


def cmd_compare(args) -> int:
    cfg = _experiment(args, args.config)
    table = run_sweep(cfg)
    comp = compare_protocols(table)
    _emit(format_records(comp.records(), COMPARISON_COLUMNS, _fmt(args, cfg)), args, cfg)
    for proto, loss in comp.missing:
        print(f"warning: {proto} row at {loss} dB has no counterpart", file=sys.stderr)
    return 0 if table.complete and not comp.missing else 1


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "calibrate": cmd_calibrate, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
