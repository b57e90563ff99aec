"""
Tests for checkpoint save/load.
"""

import numpy as np
import pytest

from backend.checkpoint import FORMAT_VERSION, MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from backend.errors import CheckpointVersionError, ConfigMismatchError, CorruptCheckpointError
from backend.losses import TaskWeights
from backend.network import build
from backend.optim import Adam
from schemas.config import NetConfig


@pytest.fixture
def trained_checkpoint(tiny_net, rng):
    """Checkpoint with non-trivial Adam moments, lambda history and rng state."""
    params = build(tiny_net, seed=5)
    optimizer = Adam(lr=1e-3)
    for _ in range(2):
        grads = {name: rng.normal(size=arr.shape) for name, arr in params.arrays.items()}
        params = params.replace(optimizer.step(params.arrays, grads))
    weights = TaskWeights(lam=0.5)
    weights.update(1, 0.4, 0.2, ema=0.9)
    generator = np.random.default_rng(9)
    generator.random(3)
    return Checkpoint(params=params, optimizer=optimizer, weights=weights, epoch=3, step=12,
                      rng_state=generator.bit_generator.state, extra={"note": "unit"})


def test_round_trip_is_bit_identical(tmp_path, trained_checkpoint):
    path = save_checkpoint(tmp_path / "a.ckpt", trained_checkpoint)
    loaded = load_checkpoint(path)
    original = trained_checkpoint
    assert loaded.params.config == original.params.config
    assert loaded.params.names() == original.params.names()
    for name in original.params:
        np.testing.assert_array_equal(loaded.params[name], original.params[name])
        np.testing.assert_array_equal(loaded.optimizer.m[name], original.optimizer.m[name])
        np.testing.assert_array_equal(loaded.optimizer.v[name], original.optimizer.v[name])
    assert loaded.optimizer.t == 2
    assert loaded.optimizer.lr == original.optimizer.lr
    assert loaded.weights.lam == original.weights.lam
    assert loaded.weights.history == original.weights.history
    assert (loaded.epoch, loaded.step) == (3, 12)
    assert loaded.extra == {"note": "unit"}


def test_rng_state_resumes_the_same_stream(tmp_path, trained_checkpoint):
    save_checkpoint(tmp_path / "a.ckpt", trained_checkpoint)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    a = np.random.default_rng()
    a.bit_generator.state = trained_checkpoint.rng_state
    b = np.random.default_rng()
    b.bit_generator.state = loaded.rng_state
    np.testing.assert_array_equal(a.random(5), b.random(5))


def test_identical_state_gives_identical_bytes(tmp_path, trained_checkpoint):
    save_checkpoint(tmp_path / "a.ckpt", trained_checkpoint)
    save_checkpoint(tmp_path / "b.ckpt", trained_checkpoint)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_no_temporary_file_is_left_behind(tmp_path, trained_checkpoint):
    save_checkpoint(tmp_path / "a.ckpt", trained_checkpoint)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.ckpt"]


def test_float32_network_round_trips(tmp_path, rng):
    config = NetConfig(depth=1, base_channels=2, input_size=16, precision="float32")
    ckpt = Checkpoint(params=build(config), optimizer=Adam(), weights=TaskWeights())
    loaded = load_checkpoint(save_checkpoint(tmp_path / "f.ckpt", ckpt))
    for name in ckpt.params:
        assert loaded.params[name].dtype == np.float32
        np.testing.assert_array_equal(loaded.params[name], ckpt.params[name])


# ============================================================================
# FAILURES
# ============================================================================

def test_truncated_file_is_corrupt(tmp_path, trained_checkpoint):
    path = save_checkpoint(tmp_path / "a.ckpt", trained_checkpoint)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_flipped_payload_byte_fails_checksum(tmp_path, trained_checkpoint):
    path = save_checkpoint(tmp_path / "a.ckpt", trained_checkpoint)
    data = bytearray(path.read_bytes())
    data[-20] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_bad_magic_is_corrupt(tmp_path, trained_checkpoint):
    path = save_checkpoint(tmp_path / "a.ckpt", trained_checkpoint)
    data = path.read_bytes()
    path.write_bytes(b"NOTACKPT" + data[len(MAGIC):])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_missing_file_is_corrupt(tmp_path):
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_other_format_version_is_rejected(tmp_path, trained_checkpoint):
    path = save_checkpoint(tmp_path / "a.ckpt", trained_checkpoint)
    data = bytearray(path.read_bytes())
    data[len(MAGIC):len(MAGIC) + 4] = (FORMAT_VERSION + 1).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_expected_config_mismatch_is_rejected(tmp_path, trained_checkpoint):
    path = save_checkpoint(tmp_path / "a.ckpt", trained_checkpoint)
    other = NetConfig(depth=2, base_channels=2, input_size=16, precision="float64")
    with pytest.raises(ConfigMismatchError) as excinfo:
        load_checkpoint(path, expected=other)
    assert excinfo.value.exit_code == 2


def test_expected_config_match_loads(tmp_path, trained_checkpoint, tiny_net):
    path = save_checkpoint(tmp_path / "a.ckpt", trained_checkpoint)
    assert load_checkpoint(path, expected=tiny_net).epoch == 3
