"""
Tests for LabeledMask.
"""

import numpy as np
import pytest

from backend.errors import DimensionError
from backend.labeled_mask import LabeledMask


def test_labels_are_renumbered_contiguously():
    labels = np.array([[0, 7, 7], [3, 0, 9]])
    mask = LabeledMask.from_labels(labels)
    np.testing.assert_array_equal(mask.labels, [[0, 2, 2], [1, 0, 3]])
    assert mask.count == 3
    assert mask.areas == {1: 1, 2: 2, 3: 1}


def test_small_labels_are_dropped():
    labels = np.zeros((6, 6), dtype=int)
    labels[0:3, 0:3] = 4
    labels[5, 5] = 2
    mask = LabeledMask.from_labels(labels, min_area=2)
    assert mask.count == 1
    assert mask.areas == {1: 9}
    assert mask.centroids[1] == pytest.approx((1.0, 1.0))


def test_all_zero_labels_give_empty_mask():
    mask = LabeledMask.from_labels(np.zeros((4, 5), dtype=int))
    assert mask.count == 0
    assert mask.shape == (4, 5)
    assert not mask.binary().any()


def test_rejects_bad_input():
    with pytest.raises(DimensionError):
        LabeledMask.from_labels(np.zeros((2, 2, 2), dtype=int))
    with pytest.raises(ValueError):
        LabeledMask.from_labels(np.array([[0, -1]]))
