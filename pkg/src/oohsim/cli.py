"""Command-line front end.

Five subcommands, one per invocation:

* ``run`` — execute one configured experiment and write its reports.
* ``sweep`` — cross-product of sizes and techniques, merged into one report.
* ``calibrate`` — print, dump, or check a cost-calibration file.
* ``report`` — re-render a saved report in another format.
* ``repro`` — run a canned comparison grid against published measurements.

Exit codes: 0 success, 2 configuration error (bad flags, malformed config,
unknown figure, empty technique list), 3 I/O error.  Diagnostics go to
standard error.  The ``OOHSIM_CALIBRATION`` environment variable supplies a
calibration file when ``--calibration`` is not given.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .costs import CalibrationError, CostTable, load_calibration_file
from .experiments import (
    REPORT_FORMATS,
    REPRO_FIGURES,
    ExperimentConfig,
    comparison_csv,
    emit_reports,
    repro,
    run,
)
from .reports import RunReport, RunRow, render, rows_from_csv, rows_from_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.from_ini(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    if getattr(args, "calibration", None):
        overrides["calibration"] = args.calibration
    return replace(cfg, **overrides) if overrides else cfg


def _emit(report: RunReport, out_dir: str, formats: str, stem: str) -> int:
    chosen = tuple(f.strip() for f in formats.split(",") if f.strip())
    for path in emit_reports(report, chosen, out_dir=out_dir, stem=stem):
        print(path)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    return _emit(run(cfg), cfg.out_dir, args.formats, "report")


def cmd_sweep(args: argparse.Namespace) -> int:
    base = _config_from_args(args)
    mapping = {}
    if args.sizes is not None:
        mapping["memory_sizes"] = args.sizes
    if args.techniques is not None:
        mapping["techniques"] = args.techniques
    if args.rounds is not None:
        mapping["rounds"] = args.rounds
    grid = ExperimentConfig.from_mapping(mapping)
    cfg = replace(
        base,
        memory_sizes=grid.memory_sizes if args.sizes is not None else base.memory_sizes,
        techniques=grid.techniques if args.techniques is not None else base.techniques,
        rounds=grid.rounds if args.rounds is not None else base.rounds,
    )
    return _emit(run(cfg), cfg.out_dir, args.formats, "sweep")


def cmd_calibrate(args: argparse.Namespace) -> int:
    if args.check:
        overrides = load_calibration_file(args.check)
        CostTable.from_calibration(args.check)  # keys must also apply cleanly
        print(f"ok: {args.check} ({len(overrides)} overrides)")
        return EXIT_OK
    table = CostTable.from_calibration(args.calibration)
    text = table.dump_calibration()
    if args.dump:
        Path(args.dump).write_text(text, encoding="utf-8")
        print(args.dump)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    path = Path(args.input)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        raw_rows = rows_from_json(text)
    else:
        raw_rows = rows_from_csv(text)
    report = RunReport(rows=[RunRow(**r) for r in raw_rows])
    rendered = render(report, args.format)
    if args.out:
        Path(args.out).write_text(rendered, encoding="utf-8", newline="")
        print(args.out)
    else:
        sys.stdout.write(rendered)
    return EXIT_OK


def cmd_repro(args: argparse.Namespace) -> int:
    table = CostTable.from_calibration(args.calibration)
    rows = repro(args.figure, table)
    text = comparison_csv(rows)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dest = out_dir / f"repro_{args.figure}.csv"
    dest.write_text(text, encoding="utf-8", newline="")
    sys.stdout.write(text)
    print(dest, file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oohsim",
        description="Deterministic simulator of dirty-page tracking techniques.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", type=int, metavar="N", help="override the seed")
        p.add_argument(
            "--calibration", metavar="PATH", help="cost-calibration file"
        )
        p.add_argument(
            "--formats",
            default=",".join(REPORT_FORMATS),
            metavar="LIST",
            help="comma list of csv,json,plotdata (default: all)",
        )

    p_run = sub.add_parser("run", help="run one configured experiment")
    p_run.add_argument("--config", metavar="PATH", help="INI file, [experiment] section")
    add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="cross-product of sizes x techniques")
    p_sweep.add_argument("--config", metavar="PATH", help="base INI config")
    p_sweep.add_argument("--sizes", metavar="LIST", help="comma list, e.g. 1MB,1GB")
    p_sweep.add_argument(
        "--techniques", metavar="LIST", help="comma list of proc,uffd,spml,epml"
    )
    p_sweep.add_argument("--rounds", type=int, metavar="N")
    add_common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_cal = sub.add_parser("calibrate", help="print, dump, or check calibration")
    p_cal.add_argument("--calibration", metavar="PATH", help="overrides to merge")
    p_cal.add_argument("--dump", metavar="PATH", help="write the effective table")
    p_cal.add_argument("--check", metavar="PATH", help="validate a calibration file")
    p_cal.set_defaults(func=cmd_calibrate)

    p_rep = sub.add_parser("report", help="re-render a saved report")
    p_rep.add_argument("input", metavar="PATH", help="existing .csv or .json report")
    p_rep.add_argument(
        "--format", default="csv", choices=sorted(REPORT_FORMATS), help="output format"
    )
    p_rep.add_argument("--out", metavar="PATH", help="write here instead of stdout")
    p_rep.set_defaults(func=cmd_report)

    p_repro = sub.add_parser(
        "repro", help="compare simulated values with published measurements"
    )
    p_repro.add_argument(
        "--figure",
        required=True,
        metavar="ID",
        help=f"one of {', '.join(REPRO_FIGURES)} (fig8 is the slow one)",
    )
    p_repro.add_argument("--out", default=".", metavar="DIR", help="output directory")
    p_repro.add_argument("--calibration", metavar="PATH", help="cost-calibration file")
    p_repro.set_defaults(func=cmd_repro)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CalibrationError, ValueError) as exc:
        # ConfigError and UnknownFigure are ValueErrors; argparse handles
        # flag syntax itself (also exiting 2)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
