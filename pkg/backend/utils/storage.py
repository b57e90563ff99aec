"""
backend/utils/storage.py
Raster and CSV formats shared by the commands.

Rasters are single-page TIFFs written with tifffile:
  images      uint8 or uint16 grayscale, read back as float in [0, 1]
  maps        uint16, 65535 = 1.0 (round half to even)
  labels      uint16 instance masks
  overlays    uint8 RGB
CSV files are UTF-8 with a fixed header; floats are written with repr so
identical runs produce identical bytes.
"""

import csv
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Sequence, Union

import numpy as np
import tifffile

from backend.errors import DataError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MAP_SCALE = 65535
MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("id", "split", "image", "mask", "seed")
TRAIN_LOG_HEADER = ("epoch", "step", "lambda", "E1", "E2", "E", "l_r")
PER_IMAGE_HEADER = ("image_id", "dice", "mse")
PER_CELL_HEADER = ("image_id", "gt_label", "pred_label", "dice", "mse")


# ============================================================================
# RASTERS
# ============================================================================

def _write_tiff(path: PathLike, data: np.ndarray, photometric: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated writes byte-identical
    tifffile.imwrite(path, data, photometric=photometric, metadata=None)


def read_raster(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"raster not found: {path}")
    try:
        data = tifffile.imread(path)
    except Exception as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from exc
    return np.asarray(data)


def quantize_map(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint16 with 65535 = 1.0, ties rounded to even."""
    return np.rint(np.clip(values, 0.0, 1.0) * MAP_SCALE).astype(np.uint16)


def dequantize_map(data: np.ndarray) -> np.ndarray:
    return data.astype(np.float64) / MAP_SCALE


def write_map(path: PathLike, values: np.ndarray):
    _write_tiff(path, quantize_map(values), "minisblack")


def read_map(path: PathLike) -> np.ndarray:
    data = read_raster(path)
    if data.ndim != 2 or data.dtype != np.uint16:
        raise DataError(f"{path}: expected a 2-D uint16 map, got {data.dtype} {data.shape}")
    return dequantize_map(data)


def write_image(path: PathLike, values: np.ndarray, bits: int = 16):
    """Grayscale image in [0, 1] stored with 8 or 16 bits."""
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    top = 255 if bits == 8 else MAP_SCALE
    dtype = np.uint8 if bits == 8 else np.uint16
    _write_tiff(path, np.rint(np.clip(values, 0.0, 1.0) * top).astype(dtype), "minisblack")


def read_image(path: PathLike) -> np.ndarray:
    """Single-channel image as float64 in [0, 1]."""
    data = read_raster(path)
    if data.ndim == 3 and data.shape[-1] in (3, 4):
        data = data[..., :3].mean(axis=-1)
    if data.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image, got shape {data.shape}")
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float64) / np.iinfo(data.dtype).max
    return np.clip(data.astype(np.float64), 0.0, 1.0)


def write_labels(path: PathLike, labels: np.ndarray):
    if labels.size and labels.max() > np.iinfo(np.uint16).max:
        raise DataError(f"{path}: too many labels for a 16-bit mask")
    _write_tiff(path, labels.astype(np.uint16), "minisblack")


def read_labels(path: PathLike) -> np.ndarray:
    data = read_raster(path)
    if data.ndim != 2 or not np.issubdtype(data.dtype, np.integer):
        raise DataError(f"{path}: expected a 2-D integer label mask, got {data.dtype} {data.shape}")
    return data.astype(np.int64)


def write_overlay(path: PathLike, rgb: np.ndarray):
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise DataError(f"{path}: overlay must be H x W x 3, got shape {rgb.shape}")
    _write_tiff(path, rgb.astype(np.uint8), "rgb")


# ============================================================================
# CSV
# ============================================================================

def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def append_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]):
    """Append rows, writing the header first if the file is new or empty."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        if fresh:
            writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def read_csv(path: PathLike, header: Sequence[str]) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"CSV not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != tuple(header):
            raise DataError(f"{path}: header {reader.fieldnames} != {list(header)}")
        return list(reader)


# ============================================================================
# MANIFEST
# ============================================================================

class ManifestEntry(NamedTuple):
    id: str
    split: str
    image: str
    mask: str
    seed: int


def write_manifest(root: PathLike, entries: Sequence[ManifestEntry]) -> Path:
    target = Path(root) / MANIFEST_NAME
    write_csv(target, MANIFEST_HEADER, entries)
    return target


def read_manifest(root: PathLike, split: str = None) -> List[ManifestEntry]:
    """Entries of a dataset directory; every referenced file must exist."""
    root = Path(root)
    rows = read_csv(root / MANIFEST_NAME, MANIFEST_HEADER)
    entries = []
    for row in rows:
        try:
            entry = ManifestEntry(row["id"], row["split"], row["image"], row["mask"], int(row["seed"]))
        except ValueError as exc:
            raise DataError(f"{root / MANIFEST_NAME}: bad row {row}") from exc
        for rel in (entry.image, entry.mask):
            if not (root / rel).is_file():
                raise DataError(f"manifest entry {entry.id} points at missing file {rel}")
        if split is None or entry.split == split:
            entries.append(entry)
    return entries


def stem_of(path: PathLike) -> str:
    name = os.path.basename(str(path))
    for ext in (".tiff", ".tif"):
        if name.lower().endswith(ext):
            return name[: -len(ext)]
    return os.path.splitext(name)[0]
