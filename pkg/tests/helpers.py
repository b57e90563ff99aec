"""
Small array builders and numerical oracles used across test modules.
"""

import numpy as np


def disk_mask(shape, centre, radius):
    rows, cols = np.indices(shape)
    return (rows - centre[0]) ** 2 + (cols - centre[1]) ** 2 <= radius ** 2


def square_mask(shape, top, left, size):
    mask = np.zeros(shape, dtype=bool)
    mask[top:top + size, left:left + size] = True
    return mask


def central_difference(fn, x, index, h=1e-5):
    """(fn(x + h e_i) - fn(x - h e_i)) / 2h for a scalar-valued fn of an array."""
    plus, minus = x.copy(), x.copy()
    plus[index] += h
    minus[index] -= h
    return (fn(plus) - fn(minus)) / (2 * h)
