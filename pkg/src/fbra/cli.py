"""Command-line front end: ``fbra run`` and ``fbra sweep``.

Exit status is 0 on success, 1 for configuration errors and 2 when a
simulation fails at runtime.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import __version__
from .metrics import aggregate, run_summary, timeseries
from .netsim.scenario import ConfigError, Scenario, load_config, run

logger = logging.getLogger("fbra")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

TIMESERIES_SCHEMA = "fbra-timeseries v1"
TIMESERIES_COLUMNS = ("time_s", "flow_id", "sending_rate_kbps", "fec_rate_kbps",
                      "goodput_kbps", "owd_ms")
AGGREGATE_SCHEMA = "fbra-aggregate/1"


def _configure_logging() -> None:
    level = os.environ.get("FBRA_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _scenario(args: argparse.Namespace) -> Scenario:
    scenario = load_config(args.scenario)
    overrides = {}
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    if args.fec_interval_min is not None:
        overrides["fec_interval_min"] = args.fec_interval_min
    if args.fec_interval_max is not None:
        overrides["fec_interval_max"] = args.fec_interval_max
    return replace(scenario, **overrides) if overrides else scenario


def write_outputs(scenario: Scenario, out: Path) -> dict:
    """Run one simulation and write trace.csv, summary.json and timeseries.csv."""
    trace = run(scenario)
    out.mkdir(parents=True, exist_ok=True)
    trace.write(out / "trace.csv")
    summary = run_summary(trace)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "timeseries.csv", "w", newline="") as fh:
        fh.write(f"# {TIMESERIES_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=TIMESERIES_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(timeseries(trace))
    return summary


def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = _scenario(args)
        if args.seed is not None:
            scenario = replace(scenario, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = write_outputs(scenario, Path(args.out))
    except Exception as exc:  # noqa: BLE001 - any simulator failure maps to exit 2
        logger.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not args.quiet:
        print(json.dumps({"out": str(args.out), "frcc": summary["frcc"],
                          "tfs": summary.get("tfs")}))
    return EXIT_OK


def _sweep_one(item: Tuple[Scenario, str]) -> Tuple[int, Optional[dict], Optional[str]]:
    scenario, out = item
    try:
        return scenario.seed, write_outputs(scenario, Path(out)), None
    except Exception as exc:  # noqa: BLE001
        return scenario.seed, None, f"{type(exc).__name__}: {exc}"


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.seeds < 1:
        print("config error: --seeds must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        scenario = _scenario(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    first = args.seed if args.seed is not None else 1
    items = [(replace(scenario, seed=s), str(out / f"seed_{s}"))
             for s in range(first, first + args.seeds)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, items))
    else:
        results = [_sweep_one(item) for item in items]

    summaries = [s for _, s, _ in results if s is not None]
    failures = {seed: err for seed, _, err in results if err is not None}
    for seed, err in failures.items():
        print(f"seed {seed} failed: {err}", file=sys.stderr)
    doc = {
        "schema": AGGREGATE_SCHEMA,
        "topology": scenario.topology,
        "seeds": [seed for seed, s, _ in results if s is not None],
        "failed_seeds": sorted(failures),
        "metrics": aggregate(summaries),
    }
    (out / "aggregate.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        print(f"{len(summaries)}/{len(items)} runs ok -> {out / 'aggregate.json'}")
    return EXIT_RUNTIME if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbra", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scenario", required=True, help="scenario config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--duration", type=float, default=None, help="override duration (s)")
        p.add_argument("--fec-interval-min", type=int, default=None)
        p.add_argument("--fec-interval-max", type=int, default=None)
        p.add_argument("-q", "--quiet", action="store_true")

    p_run = sub.add_parser("run", help="run one simulation")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run seeds seed..seed+N-1 and aggregate")
    common(p_sweep)
    p_sweep.add_argument("--seeds", type=int, required=True, help="number of seeds")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse usage errors are configuration errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
