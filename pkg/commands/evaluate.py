"""
commands/evaluate.py
eval: compare predicted label masks with ground-truth masks.

Predictions are matched to ground truth by id; a trailing "_labels" in a
prediction's file name is ignored. Outputs per_image.csv, per_cell.csv and
summary.txt.
"""

import logging
from pathlib import Path
from typing import Dict

from backend.errors import DataError
from backend.labeled_mask import LabeledMask
from backend.metrics import aggregate, evaluate_pair
from backend.utils import storage
from commands.common import expand_inputs, prepare_out

logger = logging.getLogger(__name__)

NAME = "eval"
HELP = "Evaluate predicted label masks against ground truth (Dice / MSE)"

PRED_SUFFIX = "_labels"


def add_arguments(parser):
    parser.add_argument("--pred-dir", required=True, help="Directory of predicted label masks")
    parser.add_argument("--gt-dir", required=True, help="Directory of ground-truth label masks")
    parser.add_argument("--out", required=True, help="Directory for the report")


def _by_id(directory: str, strip: str = "") -> Dict[str, Path]:
    """Files keyed by id; when any name ends in ``strip`` only those count (segment also writes overlays)."""
    paths = expand_inputs([directory])
    if strip and any(storage.stem_of(p).endswith(strip) for p in paths):
        paths = [p for p in paths if storage.stem_of(p).endswith(strip)]
    found = {}
    for path in paths:
        stem = storage.stem_of(path)
        if strip and stem.endswith(strip):
            stem = stem[: -len(strip)]
        found[stem] = path
    return found


def run(args, config) -> int:
    preds = _by_id(args.pred_dir, PRED_SUFFIX)
    truths = _by_id(args.gt_dir)
    missing = sorted(set(truths) - set(preds))
    extra = sorted(set(preds) - set(truths))
    if missing or extra:
        raise DataError(f"unmatched files: no prediction for {missing}, no ground truth for {extra}")

    out = prepare_out(args.out, config)
    images, cells = [], []
    for image_id in sorted(truths):
        pred = LabeledMask.from_labels(storage.read_labels(preds[image_id]))
        gt = LabeledMask.from_labels(storage.read_labels(truths[image_id]))
        image_score, cell_scores = evaluate_pair(image_id, pred, gt)
        images.append(image_score)
        cells.extend(cell_scores)

    report = aggregate(images, cells)
    storage.write_csv(out / "per_image.csv", storage.PER_IMAGE_HEADER, report.images)
    storage.write_csv(out / "per_cell.csv", storage.PER_CELL_HEADER, report.cells)
    (out / "summary.txt").write_text(report.summary_text(), encoding="utf-8")
    logger.info(f"eval finished: dice {report.image_dice}", extra={"command": NAME})
    return 0
