"""Command-line entry point: ``agl run|report|validate|convert``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import AGLError, ConfigError, ContractError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_TRUNCATED = 0, 2, 3, 4

logger = logging.getLogger("agl")


def _parser():
    p = argparse.ArgumentParser(prog="agl", description="Automated graph learning solver.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the pipeline described by a config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--time-budget", type=float, dest="time_budget")
    rep = sub.add_parser("report", help="print the summary of a finished run")
    rep.add_argument("--in", required=True, dest="in_dir")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("--config", required=True)
    c = sub.add_parser("convert", help="convert a public benchmark to the dataset layout")
    c.add_argument("format", choices=["planetoid", "tu"])
    c.add_argument("--raw", required=True, help="directory holding the raw files")
    c.add_argument("--name", required=True, help="dataset name, e.g. cora or MUTAG")
    c.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    from . import solver

    if args.command == "validate":
        try:
            solver.SolverConfig.load(args.config)
        except ConfigError as exc:
            print(f"invalid: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print("ok")
        return EXIT_OK

    if args.command == "report":
        try:
            obj = solver.load_report(args.in_dir)
        except (OSError, ValueError) as exc:
            print(f"cannot read report: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        sys.stdout.write(solver.render_summary(obj))
        return EXIT_OK

    if args.command == "convert":
        from .convert import convert_planetoid, convert_tu
        try:
            fn = convert_planetoid if args.format == "planetoid" else convert_tu
            print(json.dumps(fn(args.raw, args.name, args.out), sort_keys=True))
        except (AGLError, OSError) as exc:
            print(f"conversion failed: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK

    try:
        cfg = solver.SolverConfig.load(args.config).with_overrides(args.seed, args.time_budget)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = solver.run_pipeline(cfg)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AGLError, ArithmeticError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        solver.emit_report(report, args.out)
    except OSError as exc:
        print(f"cannot write report: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_TRUNCATED if report.budget_truncated else EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
