"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, pipeline
from .config import RunConfig
from .errors import BackendError, RefevalError

log = logging.getLogger("refeval")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, required=True, help="run configuration (JSON)")
    p.add_argument("--resume", action="store_true",
                   help="continue an existing run directory (completed work is always skipped)")
    p.add_argument("--seed", type=int, help="override the seed; only honored on a fresh run")
    p.add_argument("--parallelism", type=int, help="bound on concurrent model calls")
    p.add_argument("--backend", choices=("http", "mock"))
    p.add_argument("--playbook", help="mock playbook (line-delimited JSON rules)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refeval",
                                     description="Reference-grounded knowledge evaluation of language models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    sub.add_parser("ingest", parents=[common], help="load and chunk the reference corpus")
    sub.add_parser("extract", parents=[common], help="extract knowledge units from every passage")
    sub.add_parser("cluster", parents=[common], help="preview the first round's clusters")
    run = sub.add_parser("run", parents=[common], help="run evaluation rounds until termination")
    run.add_argument("--stop-after", type=int, default=None, help=argparse.SUPPRESS)
    sub.add_parser("report", parents=[common], help="rewrite the report bundle")
    base = sub.add_parser("baseline", parents=[common], help="score the comparison evaluators")
    base.add_argument("--method", default="all", choices=("bleu", "embed", "jw_or", "jw_r", "all"))
    comp = sub.add_parser("compare", help="join the summaries of several runs into one table")
    comp.add_argument("run_dirs", nargs="+", type=Path)
    comp.add_argument("--output", type=Path, help="write the table here instead of stdout")
    comp.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> RunConfig:
    config = RunConfig.load(args.config)
    if args.backend:
        config.backend = args.backend
    if args.playbook:
        config.playbook = str(Path(args.playbook).resolve())
    if args.parallelism is not None:
        config.parallelism = args.parallelism
    if args.seed is not None:
        prior = pipeline.stored_seed(config.run_path)
        if prior is None:
            config.seed = args.seed
        elif prior != args.seed:
            log.warning("--seed ignored: run directory already uses seed %d", prior)
            config.seed = prior
    config.validate()
    return config


def dispatch(args) -> int:
    if args.command == "compare":
        return pipeline.cmd_compare(args.run_dirs, args.output)
    config = load_config(args)
    if args.command == "ingest":
        return pipeline.cmd_ingest(config)
    if args.command == "extract":
        return pipeline.cmd_extract(config)
    if args.command == "cluster":
        return pipeline.cmd_cluster(config)
    if args.command == "run":
        return pipeline.cmd_run(config, stop_after=args.stop_after)
    if args.command == "report":
        return pipeline.cmd_report(config)
    if args.command == "baseline":
        return pipeline.cmd_baseline(config, args.method)
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except BackendError as exc:
        print(f"error: model backend failed: {exc}", file=sys.stderr)
        return exc.exit_code
    except RefevalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
