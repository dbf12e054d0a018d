"""Command-line entry point: ``robust-lds {simulate,filter,benchmark}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import experiment
from .config import ConfigError, parse_config, parse_seeds

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2

logger = logging.getLogger("robust_lds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-lds", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "write simulated data only"),
                        ("filter", "run filters on a data file or a fresh simulation"),
                        ("benchmark", "multi-seed run with an aggregate table")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--seeds", metavar="a..b", help="override the configured seeds")
        p.add_argument("--out", metavar="DIR", help="override the configured output directory")
        if name != "simulate":
            p.add_argument("--filters", metavar="name,name", help="run only these filters")
        if name == "filter":
            p.add_argument("--data", metavar="CSV", help="filter this data file instead of simulating")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        if args.seeds:
            try:
                cfg = replace(cfg, seeds=parse_seeds(args.seeds))
            except ValueError as exc:
                raise ConfigError(f"--seeds: {exc}") from None
        if getattr(args, "filters", None):
            cfg = cfg.select(n.strip() for n in args.filters.split(",") if n.strip())
            if not cfg.filters:
                raise ConfigError("--filters selected no filter")
        if args.command == "simulate":
            return experiment.simulate_only(cfg, args.out)
        data = None
        if getattr(args, "data", None):
            scen = experiment.build_scenario(cfg)
            data = experiment.read_data_csv(args.data, scen.ny, scen.nx)
        return experiment.run(cfg, args.out, data=data, table=args.command == "benchmark")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
