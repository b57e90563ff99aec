"""
commands/gen_data.py
gen-data: synthetic train/test scenes plus manifest.csv.
"""

import logging

from backend.synthdata import write_dataset
from commands.common import prepare_out

logger = logging.getLogger(__name__)

NAME = "gen-data"
HELP = "Generate a synthetic dataset (train/ and test/ splits with manifest)"


def add_arguments(parser):
    parser.add_argument("--out", required=True, help="Dataset directory to create")


def run(args, config) -> int:
    out = prepare_out(args.out, config)
    entries = write_dataset(out, config.scene, config.data)
    logger.info(f"gen-data finished: {len(entries)} scenes", extra={"command": NAME})
    return 0
