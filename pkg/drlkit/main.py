"""
Command-line entry point.

    python -m drlkit pretrain --config configs/desk.toml --seed 1 --out runs/s1
    python -m drlkit gen      --config configs/desk.toml --seed 1 --out runs/s1
    python -m drlkit train    ...
    python -m drlkit eval     ...
    python -m drlkit report   --out runs/s1

Exit codes: 0 success, 1 other toolkit error, 2 invalid config,
3 missing artifact, 4 numerical divergence.
"""

import argparse
import logging
import sys
from typing import Optional, Sequence

from dotenv import load_dotenv

from drlkit.models.settings import load_experiment
from drlkit.services import experiment_service
from drlkit.utils.errors import (
    ConfigError,
    DivergenceError,
    DRLError,
    MissingArtifactError,
    NonFiniteError,
)
from drlkit.utils.logging_config import configure_logging, set_run_context

logger = logging.getLogger("drlkit")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4

COMMANDS = ("pretrain", "gen", "train", "eval", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drlkit", description="Data-centric robust learning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="experiment TOML file")
        cmd.add_argument("--seed", type=int, help="root seed for every random stream")
        cmd.add_argument("--out", help="experiment directory")
        cmd.add_argument("--threads", type=int, help="worker threads (default: physical cores)")
        cmd.add_argument("--log-level", default=None, help="overrides LOG_LEVEL")
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, MissingArtifactError):
        return EXIT_MISSING
    if isinstance(exc, (DivergenceError, NonFiniteError)):
        return EXIT_DIVERGED
    return EXIT_ERROR


def run(args: argparse.Namespace) -> None:
    cfg = load_experiment(args.config, seed=args.seed, out=args.out, threads=args.threads)
    set_run_context(run_id=f"{cfg.name}/{args.command}", seed=cfg.seed)

    if args.command == "report":
        path = experiment_service.cmd_report(cfg.out_dir)
        print(path.with_name("summary.txt").read_text(), end="")
        return

    layout = experiment_service.snapshot_config(cfg, args.config)
    if args.command == "pretrain":
        experiment_service.cmd_pretrain(cfg, layout)
    elif args.command == "gen":
        experiment_service.cmd_gen(cfg, layout)
    elif args.command == "train":
        experiment_service.cmd_train(cfg, layout)
    elif args.command == "eval":
        experiment_service.cmd_eval(cfg, layout)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        run(args)
    except DRLError as exc:
        code = exit_code_for(exc)
        logger.error("%s failed (%s): %s", args.command, type(exc).__name__, exc)
        print(f"drlkit {args.command}: {exc}", file=sys.stderr)
        return code
    logger.info("%s finished", args.command)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
