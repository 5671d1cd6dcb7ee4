"""Command-line front end: `run COMMAND` and `report CSV...`.

Exit codes: 0 success, 1 error, 2 verdict failure.
"""

import argparse
import logging
import math
import os
import signal
import sys

import pandas as pd

from core import export
from core.config import Config
from core.pipeline import COMMANDS, Pipeline, curve_verdict
from lab import bemetrics
from lab.errors import LabError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VERDICT_FAIL = 2

REPORT_COLUMNS = ["scope", "estimator", "correction", "slope", "stability", "resolved", "status", "pass"]

log = logging.getLogger("Pipeline")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="[%(name)s] %(message)s",
        stream=sys.stderr,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="belab",
        description="Berry-Esseen laboratory for M-estimators of the AR(1)-ARCH(1) chain.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="action", required=True)

    run = sub.add_parser("run", help="run one experiment command")
    run.add_argument("command", choices=COMMANDS)
    run.add_argument("--config", default=None, help="INI configuration file")
    run.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    run.add_argument("--out", default=None, help="output directory (overrides [experiment] output_dir)")
    run.add_argument("--seed", type=int, default=None, help="master seed override")

    report = sub.add_parser("report", help="summarize BECurve CSV files")
    report.add_argument("paths", nargs="*", help="be_curve.csv files")
    report.add_argument("--config", default=None, help="INI file supplying the [rate_fit] bands")
    return parser


def cmd_run(args) -> int:
    if args.threads is not None and args.threads < 1:
        raise LabError(f"--threads must be >= 1, got {args.threads}")
    cfg = Config(args.config, seed_override=args.seed, output_override=args.out)
    pipeline = Pipeline(cfg, threads=args.threads, on_status=print)
    result = pipeline.run(args.command)
    return EXIT_OK if result.passed else EXIT_VERDICT_FAIL


def report_table(paths, cfg: Config) -> pd.DataFrame:
    """One row per (scope, estimator) across the given curve files."""
    bands = {
        "slope_lo": cfg.slope_lo,
        "slope_hi": cfg.slope_hi,
        "log_band": cfg.log_band,
        "stability_max": cfg.stability_max,
        "floor_level": cfg.floor_level,
    }
    rows = []
    for path in paths:
        for curve in export.read_curves(path):
            if math.isnan(curve.slope) and len(curve.points) >= 3:
                slope, intercept = bemetrics.rate_fit(curve)
                curve = bemetrics.BECurve(curve.points, curve.theta_scope, curve.estimator, curve.R,
                                          slope, intercept, curve.correction)
            rows.append(curve_verdict(curve, **bands))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def cmd_report(args) -> int:
    cfg = Config(args.config)
    table = report_table(args.paths, cfg)
    if table.empty:
        print("(no curves)")
        return EXIT_OK
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK if bool(table["pass"].all()) else EXIT_VERDICT_FAIL


def main(argv=None) -> int:
    signal.signal(signal.SIGINT, lambda *_: os._exit(130))
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        if args.action == "run":
            return cmd_run(args)
        return cmd_report(args)
    except (LabError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
