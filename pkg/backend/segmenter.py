"""
backend/segmenter.py
Instance segmentation from the region and edge maps.

    seeds     threshold f_r, erode, cut along strong edges of f_e, label
              8-connected components, split components whose distance
              transform has separate peaks
    contours  one circle per seed, grown along its outward normal by the
              balloon force F = f_r * (1 - f_e); vertices freeze where F is
              weak or where another contour is within d_min
    snap      each vertex moves along its normal onto the nearby edge ridge
    labels    fill of every contour, small regions dropped

Contour vertices are (x, y) = (column, row) pairs ordered so the shoelace
area is positive; the outward normal of tangent (tx, ty) is (ty, -tx).
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.draw import polygon as polygon_pixels
from skimage.feature import peak_local_max
from skimage.measure import label as label_components_8
from skimage.morphology import disk

from backend.errors import DimensionError
from backend.labeled_mask import LabeledMask
from schemas.config import SegmenterParams

logger = logging.getLogger(__name__)


def _check_map(name: str, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D map, got shape {values.shape}")
    return values


# ============================================================================
# SEEDS
# ============================================================================

class Seed(NamedTuple):
    centre: Tuple[float, float]  # (row, col)
    radius: float


def _merge_close_peaks(peaks: np.ndarray, separation: float) -> List[np.ndarray]:
    """Greedy non-maximum suppression; ``peaks`` must be sorted strongest first."""
    kept: List[np.ndarray] = []
    for p in peaks:
        if all(np.hypot(*(p - q)) > separation for q in kept):
            kept.append(p)
    return kept


def _has_neck(dist: np.ndarray, a: np.ndarray, b: np.ndarray, ratio: float) -> bool:
    """True if the distance transform dips below ratio * min(peak heights) between a and b."""
    samples = int(np.ceil(np.hypot(*(b - a)) * 2)) + 1
    line = np.linspace(a, b, samples).T
    profile = ndimage.map_coordinates(dist, line, order=1, mode="nearest")
    return profile.min() < ratio * min(dist[tuple(a)], dist[tuple(b)])


def _peak_groups(dist: np.ndarray, peaks: List[np.ndarray], ratio: float) -> List[np.ndarray]:
    """Strongest peak of each group of peaks not separated by a neck."""
    parent = list(range(len(peaks)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(peaks)):
        for j in range(i + 1, len(peaks)):
            if not _has_neck(dist, peaks[i], peaks[j], ratio):
                parent[find(j)] = find(i)
    # peaks arrive strongest first, so the first member of each group leads it
    leaders = {}
    for i in range(len(peaks)):
        leaders.setdefault(find(i), peaks[i])
    return list(leaders.values())


def detect_seeds(f_r: np.ndarray, params: SegmenterParams, f_e: Optional[np.ndarray] = None) -> List[Seed]:
    """Seeds (centre, initial radius) for the contour stage, in scan order of their components.

    With an edge map, pixels where f_e reaches ``params.edge_cut`` are removed
    before labelling, so cells joined along a visible boundary seed apart.
    """
    f_r = _check_map("f_r", f_r)
    mask = f_r > params.threshold
    if not mask.any():
        return []
    if params.erosion_radius > 0:
        core = ndimage.binary_erosion(mask, structure=disk(params.erosion_radius))
    else:
        core = mask
    if f_e is not None:
        f_e = _check_map("f_e", f_e)
        if f_e.shape != mask.shape:
            raise DimensionError(f"region map {mask.shape} and edge map {f_e.shape} differ")
        interior = f_e < params.edge_cut
        mask = mask & interior
        core = core & interior
    components = label_components_8(core, connectivity=2)
    dist = ndimage.distance_transform_edt(mask)

    seeds: List[Seed] = []
    for region in range(1, int(components.max()) + 1):
        member = components == region
        if member.sum() < params.min_seed_area:
            continue
        peaks = peak_local_max(dist, min_distance=1, labels=member.astype(np.int32), exclude_border=False)
        if len(peaks):
            order = np.argsort(-dist[tuple(peaks.T)], kind="stable")
            peaks = peaks[order]
        kept = _merge_close_peaks(peaks, params.peak_separation)
        leaders = _peak_groups(dist, kept, params.neck_ratio) if len(kept) > 1 else kept
        if len(leaders) > 1:
            for p in leaders:
                seeds.append(Seed((float(p[0]), float(p[1])), params.seed_radius_factor * float(dist[tuple(p)])))
            continue
        centre = ndimage.center_of_mass(member)
        # the centroid of a curved component may sit near its border
        at_centre = float(ndimage.map_coordinates(dist, np.array(centre)[:, None], order=1)[0])
        radius = min(params.seed_radius_factor * float(dist[member].max()), max(at_centre - 1.0, 1.0))
        seeds.append(Seed((float(centre[0]), float(centre[1])), radius))
    logger.debug(f"Detected {len(seeds)} seeds")
    return seeds


# ============================================================================
# CONTOURS
# ============================================================================

@dataclass
class Contour:
    points: np.ndarray  # (n, 2) of (x, y)
    converged: bool = False
    age: int = 0
    recent: Deque[float] = field(default_factory=deque)

    @property
    def area(self) -> float:
        return polygon_area(self.points)

    @property
    def centroid(self) -> Tuple[float, float]:
        """(x, y) mean of the vertices."""
        c = self.points.mean(axis=0)
        return float(c[0]), float(c[1])


def polygon_area(points: np.ndarray) -> float:
    """Signed shoelace area; positive for our orientation."""
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def circle_contour(centre_rc: Tuple[float, float], radius: float, spacing: float, min_vertices: int = 8) -> Contour:
    n = max(min_vertices, int(math.ceil(2 * math.pi * radius / spacing)))
    theta = 2 * np.pi * np.arange(n) / n
    points = np.column_stack([centre_rc[1] + radius * np.cos(theta), centre_rc[0] + radius * np.sin(theta)])
    return Contour(points)


def seed_contours(seeds: Sequence[Seed], params: SegmenterParams) -> List[Contour]:
    """Circles for each seed, shrunk so no two start closer than d_min."""
    radii = [s.radius for s in seeds]
    for i in range(len(seeds)):
        for j in range(i + 1, len(seeds)):
            gap = math.dist(seeds[i].centre, seeds[j].centre)
            room = gap - params.d_min
            if radii[i] + radii[j] > room:
                factor = max(room, 2.0) / (radii[i] + radii[j])
                radii[i] = max(radii[i] * factor, 1.0)
                radii[j] = max(radii[j] * factor, 1.0)
    return [circle_contour(s.centre, r, params.spacing, params.min_vertices) for s, r in zip(seeds, radii)]


def outward_normals(points: np.ndarray) -> np.ndarray:
    tangent = np.roll(points, -1, axis=0) - np.roll(points, 1, axis=0)
    norm = np.linalg.norm(tangent, axis=1, keepdims=True)
    tangent = tangent / np.where(norm > 0, norm, 1.0)
    return np.column_stack([tangent[:, 1], -tangent[:, 0]])


def resample(points: np.ndarray, spacing: float, min_vertices: int = 8) -> np.ndarray:
    """Uniform arc-length resampling of a closed polygon, starting at vertex 0."""
    closed = np.vstack([points, points[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    length = arc[-1]
    if length <= 0:
        return points.copy()
    n = max(min_vertices, int(round(length / spacing)))
    s = np.arange(n) * (length / n)
    return np.column_stack([np.interp(s, arc, closed[:, 0]), np.interp(s, arc, closed[:, 1])])


def is_simple(points: np.ndarray) -> bool:
    """No two non-adjacent edges of the closed polygon intersect."""
    a = points
    b = np.roll(points, -1, axis=0)
    n = len(points)

    def orient(p, q, r):
        return np.sign((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                       - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))

    A, B = a[:, None, :], b[:, None, :]
    C, D = a[None, :, :], b[None, :, :]
    crossing = (orient(A, B, C) * orient(A, B, D) < 0) & (orient(C, D, A) * orient(C, D, B) < 0)
    i, j = np.indices((n, n))
    adjacent = (np.abs(i - j) <= 1) | (np.abs(i - j) == n - 1)
    return not bool((crossing & ~adjacent).any())


class ForceField:
    """Balloon force F = f_r * (1 - f_e) with bilinear sampling."""

    def __init__(self, f_r: np.ndarray, f_e: np.ndarray):
        f_r, f_e = _check_map("f_r", f_r), _check_map("f_e", f_e)
        if f_r.shape != f_e.shape:
            raise DimensionError(f"region map {f_r.shape} and edge map {f_e.shape} differ")
        self.values = f_r * (1.0 - f_e)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def sample(self, points: np.ndarray) -> np.ndarray:
        """F at (x, y) vertices."""
        return ndimage.map_coordinates(self.values, [points[:, 1], points[:, 0]], order=1, mode="nearest")


def evolve(contours: List[Contour], force: ForceField, params: SegmenterParams) -> List[Contour]:
    """Grow all contours together until each converges or the iteration cap is hit.

    Contours are updated one after another within an iteration, each seeing
    the latest positions of the others. Returns new Contour objects.
    """
    contours = [Contour(c.points.copy(), c.converged, c.age, deque(c.recent, maxlen=params.window))
                for c in contours]
    h, w = force.shape

    for iteration in range(params.max_iterations):
        if all(c.converged for c in contours):
            break
        for index, contour in enumerate(contours):
            if contour.converged:
                continue
            others = [c.points for k, c in enumerate(contours) if k != index]
            tree = cKDTree(np.vstack(others)) if others else None

            old = contour.points
            strength = force.sample(old)
            laplacian = 0.5 * (np.roll(old, 1, axis=0) + np.roll(old, -1, axis=0)) - old
            move = params.step * strength[:, None] * outward_normals(old) + params.curvature_weight * laplacian
            frozen = strength < params.stop_threshold
            if tree is not None:
                frozen |= tree.query(old)[0] < params.d_min
            move[frozen] = 0.0

            new = old + move
            new[:, 0] = np.clip(new[:, 0], 0.0, w - 1.0)
            new[:, 1] = np.clip(new[:, 1], 0.0, h - 1.0)
            if tree is not None:
                blocked = tree.query(new)[0] < params.d_min
                new[blocked] = old[blocked]
            displacement = float(np.abs(new - old).max()) if len(old) else 0.0

            if displacement > 0:
                new = resample(new, params.spacing, params.min_vertices)
                if not is_simple(new) or polygon_area(new) <= 0:
                    logger.debug(f"Contour {index} would self-intersect at iteration {iteration}; keeping previous")
                    contour.converged = True
                    continue
                contour.points = new
            contour.age += 1
            contour.recent.append(displacement)
            if len(contour.recent) == params.window and max(contour.recent) < params.tol:
                contour.converged = True

    stuck = [i for i, c in enumerate(contours) if not c.converged]
    if stuck:
        logger.warning(f"{len(stuck)} contour(s) did not converge within {params.max_iterations} iterations: {stuck}")
    return contours


SNAP_STEP = 0.25
SNAP_KEEP = 0.7


def snap_to_edges(contours: Sequence[Contour], f_e: np.ndarray, params: SegmenterParams) -> List[Contour]:
    """Move each vertex along its normal onto the edge ridge within ``snap_range``.

    The ridge position is the centroid of the edge profile above SNAP_KEEP of
    its peak; vertices whose profile peaks below ``snap_level`` stay put. A
    snapped contour that is no longer simple is kept as it was.
    """
    f_e = _check_map("f_e", f_e)
    h, w = f_e.shape
    offsets = np.arange(-params.snap_range, params.snap_range + 1e-9, SNAP_STEP)
    snapped: List[Contour] = []
    for index, contour in enumerate(contours):
        points = contour.points
        if len(points) < 3 or params.snap_range <= 0:
            snapped.append(contour)
            continue
        normals = outward_normals(points)
        samples = points[:, None, :] + offsets[None, :, None] * normals[:, None, :]
        profile = ndimage.map_coordinates(
            f_e, [samples[..., 1].ravel(), samples[..., 0].ravel()], order=1, mode="nearest",
        ).reshape(len(points), len(offsets))
        peak = profile.max(axis=1)
        weights = np.clip(profile - SNAP_KEEP * peak[:, None], 0.0, None)
        mass = weights.sum(axis=1)
        reach = np.where(mass > 0, (weights * offsets).sum(axis=1) / np.where(mass > 0, mass, 1.0), 0.0)
        reach[peak < params.snap_level] = 0.0

        new = points + reach[:, None] * normals
        new[:, 0] = np.clip(new[:, 0], 0.0, w - 1.0)
        new[:, 1] = np.clip(new[:, 1], 0.0, h - 1.0)
        if not is_simple(new) or polygon_area(new) <= 0:
            logger.debug(f"Snapping contour {index} would self-intersect; keeping it unsnapped")
            snapped.append(contour)
            continue
        snapped.append(Contour(new, contour.converged, contour.age, deque(contour.recent)))
    return snapped


# ============================================================================
# RASTERISATION
# ============================================================================

FILL_SHIFT = 1e-6


def fill_polygon(points: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Pixels whose centre (x=c, y=r) lies inside the polygon.

    Vertices are nudged by -FILL_SHIFT so centres on the lower/left edges
    count as inside and those on the upper/right edges do not: a square with
    integer corners (10, 10)-(20, 20) covers exactly 10 x 10 pixels.
    """
    mask = np.zeros(shape, dtype=bool)
    rr, cc = polygon_pixels(points[:, 1] - FILL_SHIFT, points[:, 0] - FILL_SHIFT, shape=shape)
    mask[rr, cc] = True
    return mask


def rasterize(contours: Sequence[Contour], shape: Tuple[int, int], min_cell_area: int) -> LabeledMask:
    """Label image from contours; overlaps go to the nearer contour centroid."""
    labels = np.zeros(shape, dtype=np.int64)
    best = np.full(shape, np.inf)
    rows, cols = np.indices(shape, dtype=np.float64)
    for index, contour in enumerate(contours, start=1):
        if len(contour.points) < 3 or abs(contour.area) < 1e-9:
            logger.warning(f"Dropping degenerate contour {index}")
            continue
        inside = fill_polygon(contour.points, shape)
        cx, cy = contour.centroid
        distance = np.hypot(cols - cx, rows - cy)
        claim = inside & (distance < best)
        labels[claim] = index
        best[claim] = distance[claim]
    return LabeledMask.from_labels(labels, min_area=min_cell_area)


# ============================================================================
# PIPELINE
# ============================================================================

def label_components(f_r: np.ndarray, params: SegmenterParams) -> LabeledMask:
    """Region-only baseline: 8-connected components of the thresholded region map."""
    f_r = _check_map("f_r", f_r)
    labels = label_components_8(f_r > params.threshold, connectivity=2)
    return LabeledMask.from_labels(labels, min_area=params.min_cell_area)


def segment(f_r: np.ndarray, f_e: np.ndarray, params: Optional[SegmenterParams] = None) -> LabeledMask:
    """Region + edge maps to an instance mask (deterministic)."""
    params = params or SegmenterParams()
    force = ForceField(f_r, f_e)
    if params.method == "components":
        result = label_components(f_r, params)
    else:
        seeds = detect_seeds(f_r, params, f_e)
        contours = evolve(seed_contours(seeds, params), force, params)
        contours = snap_to_edges(contours, f_e, params)
        result = rasterize(contours, force.shape, params.min_cell_area)
    logger.info(f"Segmented {result.count} cells with method '{params.method}'")
    return result
