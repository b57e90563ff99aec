"""
Tests for raster and CSV storage helpers.
"""

import numpy as np
import pytest

from backend.errors import DataError
from backend.utils import storage


# ============================================================================
# RASTERS
# ============================================================================

def test_map_quantisation_rounds_half_to_even():
    values = np.array([0.0, 1.0, 0.5, 0.25])
    np.testing.assert_array_equal(storage.quantize_map(values), [0, 65535, 32768, 16384])


def test_map_quantisation_clips_out_of_range():
    np.testing.assert_array_equal(storage.quantize_map(np.array([-0.2, 1.7])), [0, 65535])


def test_map_file_error_is_within_one_step(tmp_path, rng):
    values = rng.random((8, 8))
    storage.write_map(tmp_path / "m.tif", values)
    restored = storage.read_map(tmp_path / "m.tif")
    assert np.max(np.abs(restored - values)) <= 0.5 / 65535 + 1e-12


def test_read_map_rejects_non_uint16(tmp_path):
    storage.write_image(tmp_path / "img.tif", np.zeros((4, 4)), bits=8)
    with pytest.raises(DataError):
        storage.read_map(tmp_path / "img.tif")


@pytest.mark.parametrize("bits", [8, 16])
def test_image_reads_back_in_unit_range(tmp_path, bits):
    values = np.linspace(0, 1, 16).reshape(4, 4)
    storage.write_image(tmp_path / "i.tif", values, bits=bits)
    restored = storage.read_image(tmp_path / "i.tif")
    assert restored.dtype == np.float64
    np.testing.assert_allclose(restored, values, atol=1.0 / (2 ** bits - 1))


def test_write_image_rejects_other_depths(tmp_path):
    with pytest.raises(ValueError):
        storage.write_image(tmp_path / "i.tif", np.zeros((2, 2)), bits=12)


def test_labels_keep_instance_ids(tmp_path):
    labels = np.array([[0, 1, 1], [0, 2, 300]])
    storage.write_labels(tmp_path / "l.tif", labels)
    np.testing.assert_array_equal(storage.read_labels(tmp_path / "l.tif"), labels)


def test_missing_raster_is_data_error(tmp_path):
    with pytest.raises(DataError):
        storage.read_image(tmp_path / "nope.tif")


def test_overlay_must_be_rgb(tmp_path):
    with pytest.raises(DataError):
        storage.write_overlay(tmp_path / "o.tif", np.zeros((4, 4)))


def test_repeated_writes_are_byte_identical(tmp_path, rng):
    values = rng.random((6, 6))
    storage.write_map(tmp_path / "a.tif", values)
    storage.write_map(tmp_path / "b.tif", values)
    assert (tmp_path / "a.tif").read_bytes() == (tmp_path / "b.tif").read_bytes()


# ============================================================================
# CSV AND MANIFEST
# ============================================================================

def test_floats_are_written_with_repr(tmp_path):
    storage.write_csv(tmp_path / "t.csv", ("a", "b", "c"), [(0.1, np.float64(1 / 3), None)])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["a,b,c", f"0.1,{1 / 3!r},"]


def test_append_writes_header_once(tmp_path):
    path = tmp_path / "log.csv"
    storage.append_csv(path, ("x", "y"), [(1, 2)])
    storage.append_csv(path, ("x", "y"), [(3, 4)])
    assert path.read_text() == "x,y\n1,2\n3,4\n"


def test_read_csv_checks_header(tmp_path):
    storage.write_csv(tmp_path / "t.csv", ("a", "b"), [])
    with pytest.raises(DataError):
        storage.read_csv(tmp_path / "t.csv", ("a", "c"))


def test_manifest_filters_split_and_checks_files(tmp_path):
    for name in ("i0.tif", "m0.tif", "i1.tif", "m1.tif"):
        storage.write_labels(tmp_path / name, np.zeros((2, 2), dtype=int))
    entries = [
        storage.ManifestEntry("s0", "train", "i0.tif", "m0.tif", 11),
        storage.ManifestEntry("s1", "test", "i1.tif", "m1.tif", 12),
    ]
    storage.write_manifest(tmp_path, entries)
    assert storage.read_manifest(tmp_path, split="test") == [entries[1]]
    assert storage.read_manifest(tmp_path) == entries

    (tmp_path / "m1.tif").unlink()
    with pytest.raises(DataError):
        storage.read_manifest(tmp_path)


@pytest.mark.parametrize("path,stem", [
    ("dir/a.tif", "a"),
    ("b.TIFF", "b"),
    ("c_labels.tif", "c_labels"),
    ("d.png", "d"),
])
def test_stem_of(path, stem):
    assert storage.stem_of(path) == stem
