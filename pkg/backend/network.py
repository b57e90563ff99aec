"""
backend/network.py
Twin U-shaped encoder-decoders that predict a region map and an edge map.

Both branches have the same layout:
  enc{l}        conv3x3 -> relu -> conv3x3 -> relu, then maxpool2   (l = 0..d-1)
  bottleneck    conv3x3 -> relu -> conv3x3 -> relu
  dec{l}/up     upsample2 -> conv3x3 -> relu, concat with the enc{l} skip
  dec{l}        conv3x3 -> relu -> conv3x3 -> relu                 (l = d-1..0)
  head          conv3x3 -> sigmoid

Channels are base * 2**l at level l. The edge branch reads the image plus
three feature maps of the region branch: the enc0 block output, the enc1
block output upsampled to full size (depth >= 2 only) and the dec0 output.
Edge-branch parameters therefore never influence the region map.

Parameter names are "<branch>/<layer>.kernel" and "<branch>/<layer>.bias",
e.g. "region/enc0/conv1.kernel".
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from backend.errors import DimensionError
from backend.tensorgrid import (
    Tape,
    TensorGrid,
    concat_channels,
    conv2d,
    maxpool2,
    relu,
    resolve_dtype,
    sigmoid,
    upsample2,
)
from schemas.config import NetConfig

logger = logging.getLogger(__name__)

BRANCHES = ("region", "edge")


class LayerSpec(NamedTuple):
    path: str
    c_in: int
    c_out: int


def channels(config: NetConfig, level: int) -> int:
    return config.base_channels * 2 ** level


def edge_input_channels(config: NetConfig) -> int:
    c0 = channels(config, 0)
    shared = c0 + c0 + (channels(config, 1) if config.depth >= 2 else 0)
    return 1 + shared


def _branch_specs(branch: str, config: NetConfig, c_input: int) -> List[LayerSpec]:
    specs = []
    c_prev = c_input
    for level in range(config.depth):
        c = channels(config, level)
        specs.append(LayerSpec(f"{branch}/enc{level}/conv1", c_prev, c))
        specs.append(LayerSpec(f"{branch}/enc{level}/conv2", c, c))
        c_prev = c
    c_bottom = channels(config, config.depth)
    specs.append(LayerSpec(f"{branch}/bottleneck/conv1", c_prev, c_bottom))
    specs.append(LayerSpec(f"{branch}/bottleneck/conv2", c_bottom, c_bottom))
    for level in reversed(range(config.depth)):
        c = channels(config, level)
        specs.append(LayerSpec(f"{branch}/dec{level}/up", channels(config, level + 1), c))
        specs.append(LayerSpec(f"{branch}/dec{level}/conv1", 2 * c, c))
        specs.append(LayerSpec(f"{branch}/dec{level}/conv2", c, c))
    specs.append(LayerSpec(f"{branch}/head", channels(config, 0), 1))
    return specs


def layer_specs(config: NetConfig) -> List[LayerSpec]:
    """Every convolution of both branches in initialisation order."""
    return _branch_specs("region", config, 1) + _branch_specs("edge", config, edge_input_channels(config))


# ============================================================================
# PARAMETERS
# ============================================================================

@dataclass
class ModelParams:
    """Named kernel/bias arrays of both branches.

    Updates are functional: ``replace`` returns a new instance and leaves
    this one untouched.
    """
    config: NetConfig
    arrays: "OrderedDict[str, np.ndarray]"

    def names(self) -> List[str]:
        return list(self.arrays)

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def branch_names(self, branch: str) -> List[str]:
        return [n for n in self.arrays if n.startswith(branch + "/")]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        arrays = OrderedDict(self.arrays)
        for name, value in updates.items():
            if name not in arrays:
                raise KeyError(f"unknown parameter '{name}'")
            if value.shape != arrays[name].shape:
                raise DimensionError(f"{name}: shape {value.shape} != {arrays[name].shape}")
            arrays[name] = np.asarray(value, dtype=arrays[name].dtype)
        return ModelParams(self.config, arrays)

    def on_tape(self, tape: Tape) -> Dict[str, TensorGrid]:
        return {name: tape.leaf(value, name=name) for name, value in self.arrays.items()}

    def as_grids(self) -> Dict[str, TensorGrid]:
        return {name: TensorGrid(value) for name, value in self.arrays.items()}


def build(config: NetConfig, seed: int = 0) -> ModelParams:
    """He-normal kernels (fan_in = C_in * 9) and zero biases, drawn in layer order."""
    dtype = resolve_dtype(config.precision)
    rng = np.random.default_rng(seed)
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for spec in layer_specs(config):
        std = np.sqrt(2.0 / (spec.c_in * 9))
        arrays[f"{spec.path}.kernel"] = (rng.standard_normal((spec.c_out, spec.c_in, 3, 3)) * std).astype(dtype)
        arrays[f"{spec.path}.bias"] = np.zeros(spec.c_out, dtype=dtype)
    params = ModelParams(config, arrays)
    logger.info(f"Built network depth={config.depth} base={config.base_channels} "
                f"with {params.count()} parameters")
    return params


# ============================================================================
# FORWARD PASS
# ============================================================================

def _conv(grids: Mapping[str, TensorGrid], path: str, x: TensorGrid) -> TensorGrid:
    return conv2d(x, grids[f"{path}.kernel"], grids[f"{path}.bias"])


def _block(grids, path: str, x: TensorGrid) -> TensorGrid:
    x = relu(_conv(grids, f"{path}/conv1", x))
    return relu(_conv(grids, f"{path}/conv2", x))


def _branch(grids, branch: str, depth: int, x: TensorGrid) -> Tuple[TensorGrid, List[TensorGrid], TensorGrid]:
    """Run one U-net; returns (head output, encoder block outputs, dec0 output)."""
    skips = []
    for level in range(depth):
        x = _block(grids, f"{branch}/enc{level}", x)
        skips.append(x)
        x = maxpool2(x)
    x = _block(grids, f"{branch}/bottleneck", x)
    for level in reversed(range(depth)):
        x = relu(_conv(grids, f"{branch}/dec{level}/up", upsample2(x)))
        x = _block(grids, f"{branch}/dec{level}", concat_channels(x, skips[level]))
    out = sigmoid(_conv(grids, f"{branch}/head", x))
    return out, skips, x


def check_input(config: NetConfig, image: np.ndarray) -> np.ndarray:
    """Return ``image`` as [1, H, W] or raise DimensionError."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DimensionError(f"expected a single-channel 2-D image, got shape {np.shape(image)}")
    levels = 2 ** config.depth
    h, w = arr.shape
    if h < levels or w < levels or h % levels or w % levels:
        raise DimensionError(f"image {h}x{w} is not divisible by 2**depth = {levels}")
    return arr[None, :, :]


def forward(params: ModelParams, image: np.ndarray, tape: Optional[Tape] = None,
            grids: Optional[Mapping[str, TensorGrid]] = None) -> Tuple[TensorGrid, TensorGrid]:
    """Region and edge maps, each a [1, H, W] grid in (0, 1).

    With a tape, parameters become named leaves (or pass ``grids`` obtained
    from ``params.on_tape(tape)`` to reuse them) and the image is recorded
    as a constant.
    """
    config = params.config
    dtype = resolve_dtype(config.precision)
    x = check_input(config, image).astype(dtype)
    if tape is not None:
        grids = grids if grids is not None else params.on_tape(tape)
        x_grid = tape.constant(x)
    else:
        grids = grids if grids is not None else params.as_grids()
        x_grid = TensorGrid(x)

    f_r, skips, dec0 = _branch(grids, "region", config.depth, x_grid)
    shared = [x_grid, skips[0]]
    if config.depth >= 2:
        shared.append(upsample2(skips[1]))
    shared.append(dec0)
    f_e, _, _ = _branch(grids, "edge", config.depth, concat_channels(*shared))
    return f_r, f_e


def predict(params: ModelParams, image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inference helper: 2-D region and edge arrays."""
    f_r, f_e = forward(params, image)
    return f_r.values[0], f_e.values[0]
