"""
commands/predict.py
predict: region and edge maps for each input image.

Maps are written as <stem>_region.tif and <stem>_edge.tif (uint16, 65535 = 1.0).
"""

import logging
from pathlib import Path
from typing import Tuple

import numpy as np

from backend.checkpoint import load_checkpoint
from backend.network import ModelParams, predict as predict_maps
from backend.trainer import normalize_image
from backend.utils import storage
from commands.common import expand_inputs, prepare_out

logger = logging.getLogger(__name__)

NAME = "predict"
HELP = "Predict region/edge probability maps with a trained checkpoint"


def add_arguments(parser):
    parser.add_argument("--checkpoint", required=True, help="Checkpoint written by train")
    parser.add_argument("--image", nargs="+", required=True, help="Image files or directories")
    parser.add_argument("--out", required=True, help="Directory for the map files")


def load_params(args, config) -> ModelParams:
    """Checkpoint parameters; the run's net section must match the stored network."""
    return load_checkpoint(args.checkpoint, expected=config.net).params


def quantized_maps(params: ModelParams, image_path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """Maps as they read back from disk, so file and in-memory paths agree."""
    region, edge = predict_maps(params, normalize_image(storage.read_image(image_path)))
    return (storage.dequantize_map(storage.quantize_map(region)),
            storage.dequantize_map(storage.quantize_map(edge)))


def run(args, config) -> int:
    out = prepare_out(args.out, config)
    params = load_params(args, config)
    for path in expand_inputs(args.image):
        stem = storage.stem_of(path)
        region, edge = predict_maps(params, normalize_image(storage.read_image(path)))
        storage.write_map(out / f"{stem}_region.tif", region)
        storage.write_map(out / f"{stem}_edge.tif", edge)
        logger.info(f"Predicted maps for {stem}", extra={"command": NAME, "image_id": stem})
    return 0
