"""
backend/metrics.py
Whole-image and per-cell Dice / MSE, and their mean +- std summaries.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from backend.errors import DimensionError, EmptyReportError
from backend.labeled_mask import LabeledMask

logger = logging.getLogger(__name__)


class ImageScore(NamedTuple):
    image_id: str
    dice: float
    mse: float


class CellScore(NamedTuple):
    image_id: str
    gt_label: int
    pred_label: Optional[int]
    dice: float
    mse: float


class Summary(NamedTuple):
    mean: float
    std: float

    def __str__(self):
        return f"{self.mean:.4f} ± {self.std:.4f}"


# ============================================================================
# SCORES
# ============================================================================

def _binary_scores(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    overlap = int(np.count_nonzero(pred & gt))
    mass = int(np.count_nonzero(pred)) + int(np.count_nonzero(gt))
    dice = 1.0 if mass == 0 else 2.0 * overlap / mass
    mse = float(np.count_nonzero(pred ^ gt)) / pred.size
    return dice, mse


def image_metrics(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    """(dice, mse) of two binary masks; two empty masks score dice 1.

    Raises:
        DimensionError: shapes differ
        ValueError: a mask is not binary
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for name, mask in (("prediction", pred), ("ground truth", gt)):
        if mask.dtype != bool and not np.isin(mask, (0, 1)).all():
            raise ValueError(f"{name} is not a binary mask")
    return _binary_scores(pred.astype(bool), gt.astype(bool))


def _match(gt_label: int, overlaps: np.ndarray, pred: LabeledMask, gt: LabeledMask) -> int:
    """Predicted label for one gt cell: most overlap, then best dice, then nearest centroid, then lowest label."""
    gt_area = gt.areas[gt_label]
    gy, gx = gt.centroids[gt_label]

    def key(p):
        shared = int(overlaps[p])
        dice = 2.0 * shared / (gt_area + pred.areas[p])
        py, px = pred.centroids[p]
        return (-shared, -dice, math.hypot(py - gy, px - gx), p)

    return min(range(1, pred.count + 1), key=key)


def percell_metrics(pred: LabeledMask, gt: LabeledMask, image_id: str = "") -> List[CellScore]:
    """One score per gt cell against its matched prediction.

    Matching is independent per gt cell, so one predicted cell may serve
    several gt cells. Without any prediction a cell scores dice 0 and
    mse = its area / image area.
    """
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    size = gt.labels.size
    if pred.count:
        table = np.bincount(gt.labels.ravel() * (pred.count + 1) + pred.labels.ravel(),
                            minlength=(gt.count + 1) * (pred.count + 1)).reshape(gt.count + 1, pred.count + 1)
    scores = []
    for g in range(1, gt.count + 1):
        if pred.count == 0:
            scores.append(CellScore(image_id, g, None, 0.0, gt.areas[g] / size))
            continue
        p = _match(g, table[g], pred, gt)
        dice, mse = _binary_scores(pred.labels == p, gt.labels == g)
        scores.append(CellScore(image_id, g, p, dice, mse))
    return scores


# ============================================================================
# REPORT
# ============================================================================

def summarize(values: Sequence[float]) -> Summary:
    """Mean and population standard deviation."""
    if len(values) == 0:
        raise EmptyReportError("cannot summarise an empty list")
    arr = np.asarray(values, dtype=np.float64)
    return Summary(float(arr.mean()), float(arr.std()))


@dataclass
class EvalReport:
    images: List[ImageScore] = field(default_factory=list)
    cells: List[CellScore] = field(default_factory=list)
    image_dice: Optional[Summary] = None
    image_mse: Optional[Summary] = None
    cell_dice: Optional[Summary] = None
    cell_mse: Optional[Summary] = None

    def summary_text(self) -> str:
        def block(title, dice, mse):
            lines = [title]
            lines.append(f"  Dice  {dice if dice is not None else 'n/a'}")
            lines.append(f"  MSE   {mse if mse is not None else 'n/a'}")
            return lines
        lines = block("Average error for the dataset", self.image_dice, self.image_mse)
        lines += block("Average error for individual cells", self.cell_dice, self.cell_mse)
        lines.append(f"images: {len(self.images)}  cells: {len(self.cells)}")
        return "\n".join(lines) + "\n"


def aggregate(images: Sequence[ImageScore], cells: Sequence[CellScore] = ()) -> EvalReport:
    """Report with items sorted by image id (and gt label) plus mean +- std summaries."""
    if not images:
        raise EmptyReportError("no images to aggregate")
    images = sorted(images, key=lambda s: s.image_id)
    cells = sorted(cells, key=lambda s: (s.image_id, s.gt_label))
    report = EvalReport(
        images=images,
        cells=cells,
        image_dice=summarize([s.dice for s in images]),
        image_mse=summarize([s.mse for s in images]),
    )
    if cells:
        report.cell_dice = summarize([s.dice for s in cells])
        report.cell_mse = summarize([s.mse for s in cells])
    logger.info(f"Aggregated {len(images)} images and {len(cells)} cells: dice {report.image_dice}")
    return report


def evaluate_pair(image_id: str, pred: LabeledMask, gt: LabeledMask) -> Tuple[ImageScore, List[CellScore]]:
    dice, mse = image_metrics(pred.binary(), gt.binary())
    return ImageScore(image_id, dice, mse), percell_metrics(pred, gt, image_id)
