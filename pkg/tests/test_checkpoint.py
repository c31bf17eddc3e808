import numpy as np
import pytest

from latentnav.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from latentnav.params import ParamSet


def test_roundtrip_preserves_names_shapes_values(tmp_path):
    rng = np.random.default_rng(5)
    arrays = {
        "enc.w1": rng.normal(size=(4, 8)),
        "enc.b1": rng.normal(size=(8,)),
        "head.kernel": rng.normal(size=(4, 2, 3)),
        "scalar.step": np.asarray(3.0),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, arrays)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(arrays)
    for name in arrays:
        assert loaded[name].shape == np.asarray(arrays[name]).shape
        np.testing.assert_array_equal(loaded[name], arrays[name])


def test_file_starts_with_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"g.x": np.zeros(2)})
    assert path.read_bytes()[: len(MAGIC)] == MAGIC


def test_corrupted_payload_fails_crc(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"g.x": np.arange(16.0)})
    raw = bytearray(path.read_bytes())
    raw[-30] ^= 0xFF  # flip a payload byte
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"g.x": np.arange(64.0)})
    path.write_bytes(path.read_bytes()[:-40])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_paramset_roundtrip_via_checkpoint(tmp_path):
    rng = np.random.default_rng(9)
    ps = ParamSet()
    ps.add("enc.w", rng.normal(size=(3, 3)))
    ps.add("dec.w", rng.normal(size=(3, 3)))
    path = tmp_path / "ps.ckpt"
    save_checkpoint(path, ps.state_arrays())

    ps2 = ParamSet()
    ps2.add("enc.w", np.zeros((3, 3)))
    ps2.add("dec.w", np.zeros((3, 3)))
    ps2.load_arrays(load_checkpoint(path))
    np.testing.assert_array_equal(ps2["enc.w"].data, ps["enc.w"].data)


def test_paramset_load_missing_name_rejected(tmp_path):
    path = tmp_path / "ps.ckpt"
    save_checkpoint(path, {"enc.w": np.zeros((2, 2))})
    ps = ParamSet()
    ps.add("enc.w", np.zeros((2, 2)))
    ps.add("dec.w", np.zeros((2, 2)))
    with pytest.raises(KeyError):
        ps.load_arrays(load_checkpoint(path))
