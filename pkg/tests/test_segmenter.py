"""
Tests for seed detection, coupled contour evolution and rasterisation.

Oracle maps stand in for a trained network: f_r is the blurred foreground
and f_e the per-instance edge ground truth.
"""

import numpy as np
import pytest
from scipy import ndimage

from backend.errors import DimensionError
from backend.metrics import percell_metrics
from backend.segmenter import (
    Contour,
    ForceField,
    Seed,
    circle_contour,
    detect_seeds,
    evolve,
    fill_polygon,
    is_simple,
    label_components,
    outward_normals,
    polygon_area,
    rasterize,
    resample,
    seed_contours,
    segment,
    snap_to_edges,
)
from backend.synthdata import generate
from backend.trainer import instance_edge_groundtruth
from helpers import disk_mask, square_mask
from schemas.config import SceneSpec, SegmenterParams


def oracle_maps(scene):
    return ndimage.gaussian_filter(scene.region.astype(float), 1.0), scene.edge


def ring_edge(shape, centre, radius):
    rows, cols = np.indices(shape)
    d = np.hypot(rows - centre[0], cols - centre[1])
    return np.exp(-0.5 * (d - radius) ** 2)


def min_vertex_gap(a, b):
    return np.min(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1))


# ============================================================================
# SEEDS
# ============================================================================

def test_single_disk_gives_one_central_seed():
    f_r = disk_mask((64, 64), (30, 34), 12).astype(float)
    seeds = detect_seeds(f_r, SegmenterParams())
    assert len(seeds) == 1
    (row, col), radius = seeds[0]
    assert abs(row - 30) < 1 and abs(col - 34) < 1
    assert 0.5 * 12 <= radius <= 0.6 * 12 + 1


def test_empty_map_has_no_seeds():
    assert detect_seeds(np.zeros((32, 32)), SegmenterParams()) == []


def test_components_below_min_seed_area_are_ignored():
    f_r = square_mask((32, 32), 5, 5, 6).astype(float)
    params = SegmenterParams(erosion_radius=2, min_seed_area=10)
    assert detect_seeds(f_r, params) == []


def test_separate_disks_give_one_seed_each():
    f_r = (disk_mask((64, 64), (16, 16), 8) | disk_mask((64, 64), (44, 44), 9)).astype(float)
    seeds = detect_seeds(f_r, SegmenterParams())
    assert len(seeds) == 2


def test_necked_blob_is_split_at_its_peaks():
    """Two overlapping disks joined by a narrow neck become two seeds."""
    f_r = (disk_mask((64, 64), (32, 25), 9) | disk_mask((64, 64), (32, 39), 9)).astype(float)
    seeds = sorted(detect_seeds(f_r, SegmenterParams()), key=lambda s: s.centre[1])
    assert len(seeds) == 2
    assert abs(seeds[0].centre[1] - 25) <= 2 and abs(seeds[1].centre[1] - 39) <= 2


def test_elongated_blob_without_neck_stays_one_seed():
    f_r = np.zeros((64, 64))
    f_r[24:40, 12:52] = 1.0
    assert len(detect_seeds(f_r, SegmenterParams())) == 1


def test_seed_circles_keep_coupling_distance():
    params = SegmenterParams(d_min=2.0)
    seeds = [Seed((20.0, 20.0), 8.0), Seed((20.0, 32.0), 8.0)]
    first, second = seed_contours(seeds, params)
    assert min_vertex_gap(first.points, second.points) >= params.d_min - 1e-9


def test_edge_map_splits_wide_contact_pair():
    """Two cells sharing a long straight boundary seed apart once the edge map is given."""
    shape = (64, 64)
    union = disk_mask(shape, (32, 28), 10) | disk_mask(shape, (32, 36), 10)
    labels = np.where(union, 1, 0)
    labels[union & (np.indices(shape)[1] >= 32)] = 2
    f_e = instance_edge_groundtruth(labels, 1.5)
    seeds = sorted(detect_seeds(union.astype(float), SegmenterParams(), f_e), key=lambda s: s.centre[1])
    assert len(seeds) == 2
    assert seeds[0].centre[1] < 31 < 33 < seeds[1].centre[1]


def test_seed_detection_rejects_mismatched_edge_map():
    with pytest.raises(DimensionError):
        detect_seeds(np.ones((16, 16)), SegmenterParams(), np.zeros((16, 8)))


# ============================================================================
# GEOMETRY
# ============================================================================

def test_circle_is_positively_oriented_with_outward_normals():
    contour = circle_contour((20.0, 30.0), 5.0, spacing=1.0)
    assert polygon_area(contour.points) > 0
    radial = contour.points - np.array([30.0, 20.0])
    radial /= np.linalg.norm(radial, axis=1, keepdims=True)
    assert np.all(np.sum(outward_normals(contour.points) * radial, axis=1) > 0.99)


def test_circle_has_at_least_min_vertices():
    assert len(circle_contour((10.0, 10.0), 0.5, spacing=2.0, min_vertices=8).points) == 8


def test_resample_gives_uniform_spacing():
    square = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])
    points = resample(square, spacing=2.0)
    assert len(points) == 20
    gaps = np.linalg.norm(np.roll(points, -1, axis=0) - points, axis=1)
    np.testing.assert_allclose(gaps, 2.0)
    assert polygon_area(points) == pytest.approx(100.0)


def test_is_simple_detects_self_intersection():
    square = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]])
    bowtie = np.array([[0.0, 0.0], [4.0, 4.0], [4.0, 0.0], [0.0, 4.0]])
    assert is_simple(square)
    assert not is_simple(bowtie)


def test_fill_square_covers_exactly_its_pixels():
    square = np.array([[10.0, 10.0], [20.0, 10.0], [20.0, 20.0], [10.0, 20.0]])
    mask = fill_polygon(square, (32, 32))
    assert mask.sum() == 100
    np.testing.assert_array_equal(mask, square_mask((32, 32), 10, 10, 10))


def test_fill_counts_pixel_centres_inside_fractional_rectangle():
    rect = np.array([[2.5, 3.2], [7.5, 3.2], [7.5, 8.9], [2.5, 8.9]])
    mask = fill_polygon(rect, (12, 12))
    expected = np.zeros((12, 12), dtype=bool)
    expected[4:9, 3:8] = True
    np.testing.assert_array_equal(mask, expected)


def test_fill_clips_to_image():
    square = np.array([[-5.0, -5.0], [5.0, -5.0], [5.0, 5.0], [-5.0, 5.0]])
    assert fill_polygon(square, (16, 16)).sum() == 25


def test_force_field_rejects_mismatched_maps():
    with pytest.raises(DimensionError):
        ForceField(np.zeros((8, 8)), np.zeros((8, 9)))


# ============================================================================
# RASTERISATION
# ============================================================================

def test_rasterize_gives_overlaps_to_nearer_centroid():
    left = Contour(np.array([[0.0, 0.0], [12.0, 0.0], [12.0, 10.0], [0.0, 10.0]]))
    right = Contour(np.array([[8.0, 0.0], [20.0, 0.0], [20.0, 10.0], [8.0, 10.0]]))
    result = rasterize([left, right], (12, 24), min_cell_area=0)
    assert result.count == 2
    # overlap columns 8..11; centroids at x = 6 and x = 14, column 10 is a tie kept by the first
    assert (result.labels[:10, 8:11] == 1).all()
    assert (result.labels[:10, 11] == 2).all()


def test_rasterize_drops_small_and_degenerate_contours():
    big = circle_contour((16.0, 16.0), 6.0, spacing=1.0)
    small = circle_contour((3.0, 3.0), 1.5, spacing=1.0)
    flat = Contour(np.array([[5.0, 5.0], [6.0, 5.0], [7.0, 5.0]]))
    result = rasterize([big, small, flat], (32, 32), min_cell_area=30)
    assert result.count == 1
    assert result.labels[16, 16] == 1


# ============================================================================
# CONTOUR EVOLUTION
# ============================================================================

def test_single_disk_contour_stops_at_boundary():
    """A small circle inside a disk grows to the radius where the edge map peaks."""
    shape, centre, radius = (64, 64), (32.0, 32.0), 20.0
    f_r = ndimage.gaussian_filter(disk_mask(shape, centre, radius).astype(float), 1.0)
    f_e = ring_edge(shape, centre, radius)
    params = SegmenterParams()
    start = circle_contour(centre, 6.0, params.spacing, params.min_vertices)
    (final,) = evolve([start], ForceField(f_r, f_e), params)
    distances = np.hypot(final.points[:, 0] - centre[1], final.points[:, 1] - centre[0])
    assert abs(distances.mean() - radius) < 2.0
    assert distances.std() < 1.0
    assert final.converged


def test_evolution_does_not_mutate_inputs():
    f_r = ndimage.gaussian_filter(disk_mask((32, 32), (16, 16), 8).astype(float), 1.0)
    start = circle_contour((16.0, 16.0), 3.0, 2.0)
    before = start.points.copy()
    evolve([start], ForceField(f_r, ring_edge((32, 32), (16, 16), 8)), SegmenterParams())
    np.testing.assert_array_equal(start.points, before)
    assert not start.converged


def test_coupled_contours_stay_apart():
    """Two seeds inside one merged blob without any edge between them never cross."""
    shape = (48, 64)
    union = disk_mask(shape, (24, 22), 12) | disk_mask(shape, (24, 42), 12)
    f_r = ndimage.gaussian_filter(union.astype(float), 1.0)
    f_e = instance_edge_groundtruth(union.astype(int), 1.0)
    params = SegmenterParams()
    contours = seed_contours([Seed((24.0, 22.0), 6.0), Seed((24.0, 42.0), 6.0)], params)
    first, second = evolve(contours, ForceField(f_r, f_e), params)
    assert min_vertex_gap(first.points, second.points) >= 1.0
    assert first.points[:, 0].max() < second.points[:, 0].min() + params.d_min
    result = rasterize([first, second], shape, params.min_cell_area)
    assert result.count == 2


def test_contours_stay_inside_image():
    f_r = np.ones((24, 24))
    f_e = np.zeros((24, 24))
    params = SegmenterParams(max_iterations=100)
    (final,) = evolve([circle_contour((12.0, 12.0), 3.0, 2.0)], ForceField(f_r, f_e), params)
    assert final.points.min() >= 0.0
    assert final.points.max() <= 23.0


def test_contour_area_grows_until_it_stops():
    """Per iteration the area may only shrink by the curvature term, bounded by tol times the perimeter."""
    shape, centre, radius = (64, 64), (32.0, 32.0), 20.0
    f_r = ndimage.gaussian_filter(disk_mask(shape, centre, radius).astype(float), 1.0)
    force = ForceField(f_r, ring_edge(shape, centre, radius))
    params = SegmenterParams(max_iterations=1)
    contours = [circle_contour(centre, 6.0, params.spacing, params.min_vertices)]
    areas = [contours[0].area]
    perimeters = []
    for _ in range(120):
        points = contours[0].points
        perimeters.append(np.linalg.norm(np.roll(points, -1, axis=0) - points, axis=1).sum())
        contours = evolve(contours, force, params)
        areas.append(contours[0].area)
    growth = np.diff(areas)
    assert np.all(growth >= -params.tol * np.array(perimeters))
    assert areas[-1] > 8 * areas[0]


# ============================================================================
# EDGE SNAPPING
# ============================================================================

def test_snap_moves_vertices_onto_edge_ridge():
    shape, centre = (64, 64), (32.0, 32.0)
    contour = circle_contour(centre, 16.0, spacing=2.0)
    (snapped,) = snap_to_edges([contour], ring_edge(shape, centre, 17.5), SegmenterParams())
    distances = np.hypot(snapped.points[:, 0] - centre[1], snapped.points[:, 1] - centre[0])
    assert abs(distances.mean() - 17.5) < 0.3
    assert np.all(np.abs(distances - 17.5) < 0.5)


def test_snap_ignores_weak_and_distant_edges():
    shape, centre = (64, 64), (32.0, 32.0)
    contour = circle_contour(centre, 16.0, spacing=2.0)
    weak = 0.3 * ring_edge(shape, centre, 17.0)
    distant = ring_edge(shape, centre, 22.0)
    for f_e in (weak, distant):
        (snapped,) = snap_to_edges([contour], f_e, SegmenterParams())
        np.testing.assert_allclose(snapped.points, contour.points)


def test_zero_snap_range_leaves_contours_alone():
    contour = circle_contour((32.0, 32.0), 16.0, spacing=2.0)
    f_e = ring_edge((64, 64), (32.0, 32.0), 17.0)
    (snapped,) = snap_to_edges([contour], f_e, SegmenterParams(snap_range=0.0))
    assert snapped is contour


# ============================================================================
# PIPELINE
# ============================================================================

def test_components_method_labels_connected_regions():
    f_r = np.zeros((40, 40))
    f_r[disk_mask((40, 40), (10, 10), 6)] = 0.9
    f_r[disk_mask((40, 40), (28, 28), 7)] = 0.8
    f_r[2, 38] = 0.9
    result = segment(f_r, np.zeros_like(f_r), SegmenterParams(method="components"))
    assert result.count == 2
    assert result.labels[10, 10] != result.labels[28, 28]
    np.testing.assert_array_equal(result.labels, label_components(f_r, SegmenterParams(method="components")).labels)


def test_segment_rejects_mismatched_maps():
    with pytest.raises(DimensionError):
        segment(np.zeros((16, 16)), np.zeros((16, 8)))


def test_segment_empty_map_gives_no_cells():
    result = segment(np.zeros((32, 32)), np.zeros((32, 32)))
    assert result.count == 0
    assert result.labels.shape == (32, 32)


def test_separated_cells_are_recovered_from_oracle_maps():
    spec = SceneSpec(seed=21, cell_count_min=3, cell_count_max=3, radius_min=7, radius_max=8,
                     perturbation=0.1, touching_probability=0.0)
    scene = generate(spec)
    result = segment(*oracle_maps(scene), SegmenterParams())
    assert result.count == 3
    scores = percell_metrics(result, scene.instances)
    assert all(s.dice >= 0.9 for s in scores)


def test_segment_is_deterministic():
    scene = generate(SceneSpec(seed=5))
    f_r, f_e = oracle_maps(scene)
    np.testing.assert_array_equal(segment(f_r, f_e).labels, segment(f_r, f_e).labels)


@pytest.mark.slow
def test_touching_pairs_are_separated():
    """Oracle maps of touching pairs: at least 18 of 20 scenes yield two good cells."""
    good = 0
    touching_dice = []
    for seed in range(20):
        spec = SceneSpec(seed=seed, cell_count_min=2, cell_count_max=2, touching_probability=1.0,
                         radius_min=8, radius_max=10, perturbation=0.1)
        scene = generate(spec)
        assert scene.touching
        result = segment(*oracle_maps(scene), SegmenterParams())
        scores = percell_metrics(result, scene.instances)
        touching_dice.extend(s.dice for s in scores)
        if result.count == scene.instances.count:
            good += 1
    assert good >= 18
    assert np.mean(touching_dice) >= 0.8
