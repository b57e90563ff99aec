"""
commands/segment.py
segment: instance masks and colour overlays from a checkpoint or saved maps.

Writes <stem>_labels.tif (uint16) and <stem>_overlay.tif (RGB, each cell's
boundary in its own colour over the grayscale image).
"""

import logging
from pathlib import Path

import numpy as np
from skimage.color import label2rgb
from skimage.segmentation import find_boundaries

from backend.errors import DataError
from backend.segmenter import segment
from backend.utils import storage
from commands.common import expand_inputs, prepare_out
from commands.predict import load_params, quantized_maps

logger = logging.getLogger(__name__)

NAME = "segment"
HELP = "Segment cells from a checkpoint (--checkpoint) or precomputed maps (--maps)"


def add_arguments(parser):
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", help="Checkpoint written by train")
    source.add_argument("--maps", help="Directory with <stem>_region.tif / <stem>_edge.tif from predict")
    parser.add_argument("--image", nargs="+", required=True, help="Image files or directories")
    parser.add_argument("--out", required=True, help="Directory for labels and overlays")
    parser.add_argument("--method", choices=("contours", "components"), help="Overrides segment.method")


def render_overlay(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Grayscale image as RGB with inner label boundaries painted per label."""
    outline = np.where(find_boundaries(labels, mode="inner"), labels, 0)
    rgb = label2rgb(outline, image=np.clip(image, 0.0, 1.0), bg_label=0, alpha=1.0, image_alpha=1.0,
                    kind="overlay")
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)


def _read_maps(maps_dir: Path, stem: str):
    return (storage.read_map(maps_dir / f"{stem}_region.tif"),
            storage.read_map(maps_dir / f"{stem}_edge.tif"))


def run(args, config) -> int:
    if args.method:
        config.segment.method = args.method
    out = prepare_out(args.out, config)
    params = load_params(args, config) if args.checkpoint else None
    for path in expand_inputs(args.image):
        stem = storage.stem_of(path)
        if params is not None:
            region, edge = quantized_maps(params, path)
        else:
            region, edge = _read_maps(Path(args.maps), stem)
        image = storage.read_image(path)
        if image.shape != region.shape:
            raise DataError(f"{stem}: image {image.shape} and maps {region.shape} differ in size")
        mask = segment(region, edge, config.segment)
        storage.write_labels(out / f"{stem}_labels.tif", mask.labels)
        storage.write_overlay(out / f"{stem}_overlay.tif", render_overlay(image, mask.labels))
        logger.info(f"{stem}: {mask.count} cells", extra={"command": NAME, "image_id": stem})
    return 0
