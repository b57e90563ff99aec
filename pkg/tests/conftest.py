"""
Shared fixtures for the test suite.

Long end-to-end runs are marked @pytest.mark.slow and skipped unless
pytest is called with --runslow.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from schemas.config import NetConfig, SceneSpec  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    """Smallest useful network: depth 1, 2 base channels, 16x16 input, float64."""
    return NetConfig(depth=1, base_channels=2, input_size=16, precision="float64")


@pytest.fixture
def small_scene():
    """32x32 scenes with small cells so several fit."""
    return SceneSpec(image_size=32, cell_count_min=1, cell_count_max=2, radius_min=4, radius_max=5, seed=7)
