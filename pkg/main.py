# main.py
# cellseg command-line entry point
#
#   python main.py gen-data --out data
#   python main.py train --data data --out runs/adaptive
#   python main.py predict --checkpoint runs/adaptive/checkpoint_0300.ckpt --image data/test/images --out maps
#   python main.py segment --maps maps --image data/test/images --out seg
#   python main.py eval --pred-dir seg --gt-dir data/test/masks --out report
#
# Global options (before the subcommand): --config FILE, --set section.field=value, --log-level.
# Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

import argparse
import logging
import sys

from backend.config import load_config
from backend.errors import CellSegError
from backend.logging_config import setup_logging
from commands import COMMANDS

logger = logging.getLogger("cellseg")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellseg", description="Clustered-cell segmentation pipeline")
    parser.add_argument("--config", help="Flat section.field = value config file (default: $CELLSEG_CONFIG)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config value, e.g. --set train.epochs=10 (repeatable)")
    parser.add_argument("--log-level", help="Log level (default: $LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command_parser = sub.add_parser(command.NAME, help=command.HELP)
        command.add_arguments(command_parser)
        command_parser.set_defaults(handler=command)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        config = load_config(args.config, args.set)
        return args.handler.run(args, config)
    except CellSegError as exc:
        logger.error(f"{type(exc).__name__}: {exc}", extra={"command": args.command})
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
