"""Command line: ``mixfed run <config>`` and ``mixfed sweep <config> --key K --values a,b``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .runner import OutputExistsError, run, sweep

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="key = value experiment file")
    common.add_argument("--out", help="output directory (default: runs/<config name>)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mixfed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one experiment (all repeats)")
    sw = sub.add_parser("sweep", parents=[common], help="run one experiment per value of a key")
    sw.add_argument("--key", required=True)
    sw.add_argument("--values", required=True, help="comma-separated values")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed).validate()
        out = Path(args.out) if args.out else Path("runs") / Path(args.config).stem
        if args.command == "run":
            run(cfg, out, force=args.force)
        else:
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            sweep(cfg, args.key, values, out, force=args.force)
    except (ConfigError, OutputExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any failed round or I/O problem
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
