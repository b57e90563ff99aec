"""
backend/synthdata.py
Synthetic brightfield-like scenes of clustered, irregular cells.

Cells are star-convex blobs: a disk whose radius is perturbed by a few
random Fourier harmonics. A new cell is either placed against an existing
one (touching pair) or kept clear of every other cell. Touching cells are
made disjoint by clipping the later one at the radius-weighted bisector and
at pixels already taken, so the pair shares a boundary of real length.

The image is background + brighter cell bodies + a linear illumination
ramp + a dark halo outside each cell + a faint seam where cells touch +
Gaussian noise, clipped to [0, 1].
"""

import logging
import math
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.measure import label as label_components

from backend.errors import GenerationError
from backend.labeled_mask import LabeledMask
from backend.trainer import instance_edge_groundtruth
from backend.utils import storage
from schemas.config import DatasetConfig, SceneSpec

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class Blob(NamedTuple):
    centre: Tuple[float, float]  # (row, col)
    radius: float
    amplitudes: np.ndarray
    phases: np.ndarray
    harmonics: np.ndarray


class Scene(NamedTuple):
    image: np.ndarray
    region: np.ndarray
    edge: np.ndarray
    instances: LabeledMask
    touching: List[Tuple[int, int]]
    seed: int


def min_cell_area(spec: SceneSpec) -> float:
    """Smallest instance area the generator accepts."""
    return 0.5 * math.pi * (spec.radius_min * (1.0 - spec.perturbation)) ** 2


# ============================================================================
# SHAPES
# ============================================================================

def random_blob(rng: np.random.Generator, spec: SceneSpec, centre: Tuple[float, float], radius: float) -> Blob:
    count = int(rng.integers(spec.harmonics_min, spec.harmonics_max + 1)) - spec.harmonics_min + 1
    harmonics = np.arange(spec.harmonics_min, spec.harmonics_min + count)
    raw = rng.random(count)
    # sum of |a_k| stays within the perturbation budget
    amplitudes = raw / raw.sum() * spec.perturbation * rng.uniform(0.5, 1.0)
    phases = rng.uniform(0.0, 2.0 * np.pi, count)
    return Blob(centre, radius, amplitudes, phases, harmonics)


def blob_radius(blob: Blob, theta: np.ndarray) -> np.ndarray:
    modulation = np.cos(blob.harmonics[:, None] * theta[None, :] + blob.phases[:, None])
    return blob.radius * (1.0 + (blob.amplitudes[:, None] * modulation).sum(axis=0))


def blob_mask(blob: Blob, shape: Tuple[int, int]) -> np.ndarray:
    rows, cols = np.indices(shape, dtype=np.float64)
    dy, dx = rows - blob.centre[0], cols - blob.centre[1]
    theta = np.arctan2(dy, dx).ravel()
    return (np.hypot(dy, dx).ravel() <= blob_radius(blob, theta)).reshape(shape)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels = label_components(mask, connectivity=2)
    if labels.max() <= 1:
        return mask
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == counts.argmax()


def _touches(a: np.ndarray, b: np.ndarray) -> bool:
    return bool((ndimage.binary_dilation(a, structure=EIGHT_CONNECTED) & b).any())


# ============================================================================
# PLACEMENT
# ============================================================================

class _Placed(NamedTuple):
    blob: Blob
    mask: np.ndarray


def _try_place(rng, spec: SceneSpec, placed: List[_Placed], occupied: np.ndarray):
    size = spec.image_size
    radius = rng.uniform(spec.radius_min, spec.radius_max)
    reach = radius * (1.0 + spec.perturbation)
    if reach + 1 > size - reach - 2:
        return None
    partner: Optional[int] = None
    if placed and rng.random() < spec.touching_probability:
        partner = int(rng.integers(len(placed)))
        other = placed[partner].blob
        angle = rng.uniform(0.0, 2.0 * np.pi)
        spacing = rng.uniform(spec.touch_spacing_min, spec.touch_spacing_max) * (other.radius + radius)
        centre = (other.centre[0] + spacing * np.sin(angle), other.centre[1] + spacing * np.cos(angle))
    else:
        centre = (rng.uniform(reach + 1, size - reach - 2), rng.uniform(reach + 1, size - reach - 2))

    if not all(reach + 1 <= c <= size - reach - 2 for c in centre):
        return None
    for index, item in enumerate(placed):
        if index == partner:
            continue
        gap = math.dist(centre, item.blob.centre)
        if gap < spec.separation_min * (item.blob.radius + radius):
            return None

    blob = random_blob(rng, spec, centre, radius)
    mask = blob_mask(blob, (size, size)) & ~occupied
    if partner is not None:
        other = placed[partner].blob
        axis = np.subtract(centre, other.centre)
        axis /= np.linalg.norm(axis)
        cut = np.add(other.centre, axis * math.dist(centre, other.centre) * other.radius / (other.radius + radius))
        rows, cols = np.indices(mask.shape, dtype=np.float64)
        mask &= (rows - cut[0]) * axis[0] + (cols - cut[1]) * axis[1] >= 0
        mask = _largest_component(mask)
        if not _touches(mask, placed[partner].mask):
            return None
    if mask.sum() < min_cell_area(spec):
        return None
    return _Placed(blob, mask), partner


def _place_cells(rng, spec: SceneSpec, count: int) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    size = spec.image_size
    labels = np.zeros((size, size), dtype=np.int64)
    placed: List[_Placed] = []
    touching: List[Tuple[int, int]] = []
    for index in range(count):
        for attempt in range(spec.max_retries):
            result = _try_place(rng, spec, placed, labels > 0)
            if result is not None:
                break
            if attempt and attempt % 50 == 0:
                logger.warning(f"Placement of cell {index + 1} still failing after {attempt} attempts",
                               extra={"scene_id": spec.seed})
        else:
            raise GenerationError(
                f"could not place cell {index + 1} of {count} in {spec.max_retries} attempts (seed {spec.seed})")
        item, partner = result
        placed.append(item)
        labels[item.mask] = len(placed)
        if partner is not None:
            touching.append((partner + 1, len(placed)))
    return labels, touching


# ============================================================================
# INTENSITIES
# ============================================================================

def _interfaces(labels: np.ndarray) -> np.ndarray:
    """Cell pixels with an 8-neighbour that belongs to a different cell."""
    big = np.iinfo(labels.dtype).max
    highest = ndimage.maximum_filter(labels, footprint=EIGHT_CONNECTED, mode="nearest")
    lowest = ndimage.minimum_filter(np.where(labels > 0, labels, big), footprint=EIGHT_CONNECTED, mode="nearest")
    return (labels > 0) & ((highest != labels) | (lowest != labels))


def render(rng: np.random.Generator, spec: SceneSpec, labels: np.ndarray) -> np.ndarray:
    size = spec.image_size
    rows, cols = np.indices((size, size), dtype=np.float64)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ramp = spec.illumination_amplitude * ((rows * np.sin(angle) + cols * np.cos(angle)) / size - 0.5)
    image = spec.background + ramp

    for label in range(1, int(labels.max()) + 1):
        level = spec.contrast_gap * (1.0 + spec.contrast_jitter * rng.random())
        image[labels == label] += level

    if labels.any():
        outside = ndimage.distance_transform_edt(labels == 0)
        image -= np.where(labels == 0, spec.halo_amplitude * np.exp(-0.5 * outside ** 2), 0.0)
        image[_interfaces(labels)] -= 0.5 * spec.halo_amplitude

    image += rng.normal(0.0, spec.noise_std, image.shape)
    return np.clip(image, 0.0, 1.0)


# ============================================================================
# SCENES AND DATASETS
# ============================================================================

def generate(spec: SceneSpec) -> Scene:
    """One scene, fully determined by ``spec`` (including its seed).

    Raises:
        GenerationError: cells could not be packed within the retry budget
    """
    rng = np.random.default_rng(spec.seed)
    count = int(rng.integers(spec.cell_count_min, spec.cell_count_max + 1))
    labels, touching = _place_cells(rng, spec, count)
    image = render(rng, spec, labels)
    instances = LabeledMask.from_labels(labels)
    logger.debug(f"Scene with {instances.count} cells, {len(touching)} touching pairs",
                 extra={"scene_id": spec.seed})
    return Scene(
        image=image,
        region=labels > 0,
        edge=instance_edge_groundtruth(labels, spec.edge_sigma),
        instances=instances,
        touching=touching,
        seed=spec.seed,
    )


def scene_seeds(root_seed: int, count: int) -> List[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(root_seed).spawn(count)]


def write_dataset(out_dir: PathLike, scene: SceneSpec, data: DatasetConfig) -> List[storage.ManifestEntry]:
    """Generate train/ and test/ splits plus manifest.csv under ``out_dir``."""
    out_dir = Path(out_dir)
    seeds = scene_seeds(data.seed, data.train_count + data.test_count)
    entries = []
    for index, seed in enumerate(seeds):
        split = "train" if index < data.train_count else "test"
        scene_id = f"{split}_{index:04d}"
        result = generate(scene.model_copy(update={"seed": seed}))
        image_rel = f"{split}/images/{scene_id}.tif"
        mask_rel = f"{split}/masks/{scene_id}.tif"
        storage.write_image(out_dir / image_rel, result.image, bits=16)
        storage.write_labels(out_dir / mask_rel, result.instances.labels)
        entries.append(storage.ManifestEntry(scene_id, split, image_rel, mask_rel, seed))
    storage.write_manifest(out_dir, entries)
    logger.info(f"Wrote {data.train_count} train and {data.test_count} test scenes to {out_dir}")
    return entries
