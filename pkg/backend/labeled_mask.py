"""
backend/labeled_mask.py
Instance masks with contiguous labels 1..K and per-label statistics.
"""

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy import ndimage
from skimage.segmentation import relabel_sequential

from backend.errors import DimensionError


@dataclass(frozen=True)
class LabeledMask:
    labels: np.ndarray
    areas: Dict[int, int]
    centroids: Dict[int, Tuple[float, float]]  # (row, col)

    @classmethod
    def from_labels(cls, labels: np.ndarray, min_area: int = 0) -> "LabeledMask":
        """Drop labels smaller than ``min_area`` and renumber the rest 1..K in label order."""
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise DimensionError(f"label mask must be 2-D, got shape {labels.shape}")
        if labels.size and labels.min() < 0:
            raise ValueError("label mask holds negative labels")
        labels = labels.astype(np.int64)
        if min_area > 0 and labels.any():
            counts = np.bincount(labels.ravel())
            small = np.flatnonzero(counts < min_area)
            labels = np.where(np.isin(labels, small[small > 0]), 0, labels)
        labels, _, _ = relabel_sequential(labels)
        return cls._measured(labels.astype(np.int64))

    @classmethod
    def _measured(cls, labels: np.ndarray) -> "LabeledMask":
        count = int(labels.max()) if labels.size else 0
        if count == 0:
            return cls(labels, {}, {})
        ids = list(range(1, count + 1))
        areas = np.bincount(labels.ravel(), minlength=count + 1)
        centres = ndimage.center_of_mass(np.ones(labels.shape), labels, ids)
        return cls(
            labels,
            {k: int(areas[k]) for k in ids},
            {k: (float(c[0]), float(c[1])) for k, c in zip(ids, centres)},
        )

    @property
    def count(self) -> int:
        return len(self.areas)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape

    def binary(self) -> np.ndarray:
        return self.labels > 0

    def instance(self, label: int) -> np.ndarray:
        return self.labels == label
