import argparse
import logging
from pathlib import Path
import sys

from rich.console import Console
from rich.logging import RichHandler

from . import OPERATIONS, Operation
from .config import RunConfig
from .errors import ConfigError, HoptraceError
from .pipeline import Run, cmd_eval, cmd_export, cmd_filter, cmd_generate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


def validate(op: Operation) -> bool:
    errored = False
    for i, example in enumerate(op.examples):
        if example.skip:
            print(f"\t\tExample {i + 1}: ⏩ (skipped)")
            continue
        try:
            op.validate(example)
            print(f"\t\tExample {i + 1}: ✅")
        except (ValueError, HoptraceError) as e:
            print(f"\t\tExample {i + 1}: ❌")
            print(f"\t\t{e!s}")
            errored = True
    return not errored


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_yaml(args.config) if args.config is not None else RunConfig()
    return config.with_overrides(
        seed=args.seed,
        mode=args.mode,
        limit=args.limit,
        mock=args.mock,
        output_dir=args.output,
    )


def main(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(description="Synthesize, filter, export and evaluate multi-hop QA "
                                                 "reasoning traces")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity (default=INFO)")

    stage = argparse.ArgumentParser(add_help=False)
    stage.add_argument("--config", "-c", type=Path, help="path to the YAML run configuration")
    stage.add_argument("--seed", type=int, help="override the run seed")
    stage.add_argument("--mode", type=str, help="override the selection mode: SP, SP_AV or SP_AV_LJ")
    stage.add_argument("--limit", type=int, help="override the number of evaluation questions")
    stage.add_argument("--force", action="store_true", help="regenerate questions that already have a tree")
    stage.add_argument("--mock", action="store_true", help="use the scripted backends; no network access")
    stage.add_argument("--output", "-o", type=Path, help="override the output directory")
    stage.add_argument("--no-progress", action="store_true", help="do not show progress bars")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("generate", parents=[stage], help="search for reasoning traces per question")
    commands.add_parser("filter", parents=[stage], help="select one trace per question")
    commands.add_parser("export", parents=[stage], help="write the masked training file")
    commands.add_parser("eval", parents=[stage], help="evaluate the iterative retrieval agent")
    commands.add_parser("validate", help="run every worked example of every operation")
    commands.add_parser("list", help="list all registered operations")

    args = parser.parse_args(argv)
    _setup_logging(args.log_level)

    if args.command == "list":
        for module, ops in sorted(OPERATIONS.items()):
            if not ops:
                continue
            print(f"{module}:")
            for name, op in sorted(ops.items()):
                print(f"\t{name}\t({len(op.examples)} examples)")
        return EXIT_OK
    elif args.command == "validate":
        errored = False
        for module, ops in sorted(OPERATIONS.items()):
            if not ops:
                continue
            print(f"{module}:")
            for name, op in sorted(ops.items()):
                print(f"\t{name}")
                if not validate(op):
                    errored = True
        return EXIT_PARTIAL if errored else EXIT_OK

    try:
        config = _load_config(args)
        run = Run(config, show_progress=not args.no_progress and sys.stderr.isatty())
        match args.command:
            case "generate":
                return cmd_generate(run, force=args.force)
            case "filter":
                return cmd_filter(run)
            case "export":
                return cmd_export(run)
            case "eval":
                return cmd_eval(run)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except HoptraceError as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_PARTIAL
    raise AssertionError(f"unhandled command {args.command!r}")
