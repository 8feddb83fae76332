"""Command-line entry point: ``sparsegp <verb> [--config PATH] [--out DIR] [--seed N] [--jobs K]``.

Exit status: 0 success, 2 usage error, 3 partial failure, 4 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import DataError
from .experiments import EXPERIMENTS, ConfigError, emit_plots, load_config, load_manifest, parse_config, run, write_run

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARTIAL = 3
EXIT_DATA = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsegp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} study")
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--out", type=Path, help="output directory (default: runs/<verb>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=1, help="worker processes for restarts")
        p.add_argument("--plots", action="store_true", help="also emit plot data and scripts")
    p = sub.add_parser("emit-plots", help="write plot series and scripts from a manifest")
    p.add_argument("--manifest", type=Path, help="manifest.json (default: <out>/manifest.json)")
    p.add_argument("--config", type=Path, help=argparse.SUPPRESS)
    p.add_argument("--out", type=Path, required=True, help="run directory or plot output directory")
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--jobs", type=int, default=1, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with EXIT_USAGE on bad arguments
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.verb == "emit-plots":
        manifest_path = args.manifest or args.out / "manifest.json"
        try:
            manifest = load_manifest(manifest_path)
        except FileNotFoundError:
            print(f"sparsegp: usage error: {manifest_path}: no such manifest", file=sys.stderr)
            return EXIT_USAGE
        plot_dir = args.out / "plots" if args.manifest is None else args.out
        try:
            files = emit_plots(manifest, plot_dir)
        except ValueError as err:
            print(f"sparsegp: {err}", file=sys.stderr)
            return EXIT_DATA
        for f in files:
            print(f)
        return EXIT_OK

    try:
        if args.config is not None:
            cfg = load_config(args.config, args.verb, args.seed, None if args.out is None else str(args.out))
        else:
            cfg = parse_config({}, args.verb, args.seed, None if args.out is None else str(args.out))
    except ConfigError as err:
        print(f"sparsegp: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(cfg.out or Path("runs") / args.verb)
    try:
        manifest = run(cfg, jobs=max(1, args.jobs))
    except ConfigError as err:
        print(f"sparsegp: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"sparsegp: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    path = write_run(manifest, out)
    if args.plots and manifest.series:
        emit_plots(manifest, out / "plots")
    print(path)
    if manifest.errors:
        for k, v in manifest.errors.items():
            print(f"sparsegp: {k} failed: {v}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
