"""
commands/train.py
train: min-max training on a gen-data style dataset.

Writes checkpoint_0000.ckpt before the first epoch, periodic and final
checkpoints, and train_log.csv (one row per mini-batch).
"""

import logging

from backend.losses import LAMBDA_EQUAL
from backend.trainer import fit, load_samples
from commands.common import prepare_out

logger = logging.getLogger(__name__)

NAME = "train"
HELP = "Train the twin network (adaptive or fixed task weight)"


def add_arguments(parser):
    parser.add_argument("--data", required=True, help="Dataset directory with manifest.csv")
    parser.add_argument("--out", required=True, help="Run directory for checkpoints and the log")
    parser.add_argument("--resume", help="Checkpoint to continue from")
    parser.add_argument("--fixed-lambda", nargs="?", type=float, const=LAMBDA_EQUAL, default=None,
                        help="Freeze lambda (default 1/sqrt(2) when given without a value)")


def run(args, config) -> int:
    if args.fixed_lambda is not None:
        config.train.fixed_lambda = args.fixed_lambda
    out = prepare_out(args.out, config)
    samples = load_samples(args.data, "train", config.train.edge_sigma)
    state = fit(config, samples, out, resume=args.resume)
    logger.info(f"train finished at epoch {state.epoch}",
                extra={"command": NAME, "epoch": state.epoch, "lambda": state.weights.lam})
    return 0
