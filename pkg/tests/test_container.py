"""Binary container round-trips and corruption handling."""

import numpy as np
import pytest

from genviews.container import ContainerError, read_container, write_container


def _sample_arrays():
    rng = np.random.default_rng(3)
    return {
        "weight": rng.standard_normal((4, 7)).astype(np.float32),
        "bias": rng.standard_normal(7).astype(np.float32),
        "scalar3d": rng.standard_normal((2, 3, 4)).astype(np.float32),
    }


def test_round_trip_bit_exact(tmp_path):
    path = tmp_path / "model.ckpt"
    arrays = _sample_arrays()
    write_container(path, "generator", {"note": "x", "n": 5}, arrays)
    meta, loaded = read_container(path)
    assert meta["kind"] == "generator"
    assert meta["note"] == "x" and meta["n"] == 5
    assert set(loaded) == set(arrays)
    for name in arrays:
        np.testing.assert_array_equal(loaded[name], arrays[name])
        assert loaded[name].dtype == np.float32


def test_float64_input_stored_as_float32(tmp_path):
    path = tmp_path / "f64.ckpt"
    arr = np.array([[1.0, 2.0, np.pi]], dtype=np.float64)
    write_container(path, "pca_basis", {}, {"a": arr})
    _, loaded = read_container(path)
    np.testing.assert_array_equal(loaded["a"], arr.astype(np.float32))


def test_expected_kind_enforced(tmp_path):
    path = tmp_path / "enc.ckpt"
    write_container(path, "encoder", {}, {"w": np.zeros(3, np.float32)})
    read_container(path, expect_kind="encoder")
    with pytest.raises(ContainerError, match="expected 'generator'"):
        read_container(path, expect_kind="generator")


def test_missing_file(tmp_path):
    with pytest.raises(ContainerError, match="not found"):
        read_container(tmp_path / "absent.ckpt")


def test_not_a_container(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"PNG" + b"\x00" * 64)
    with pytest.raises(ContainerError, match="not a container"):
        read_container(path)


def test_flipped_byte_fails_checksum(tmp_path):
    path = tmp_path / "bits.ckpt"
    write_container(path, "classifier", {}, _sample_arrays())
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ContainerError, match="checksum"):
        read_container(path)


def test_truncation_fails_checksum(tmp_path):
    path = tmp_path / "trunc.ckpt"
    write_container(path, "classifier", {}, _sample_arrays())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 9])
    with pytest.raises(ContainerError):
        read_container(path)


def test_overwrite_replaces_atomically(tmp_path):
    path = tmp_path / "same.ckpt"
    write_container(path, "generator", {"v": 1}, {"a": np.zeros(2, np.float32)})
    write_container(path, "generator", {"v": 2}, {"a": np.ones(2, np.float32)})
    meta, arrays = read_container(path)
    assert meta["v"] == 2
    np.testing.assert_array_equal(arrays["a"], 1.0)
    assert not path.with_name(path.name + ".tmp").exists()


def test_empty_arrays_allowed(tmp_path):
    path = tmp_path / "empty.ckpt"
    write_container(path, "generator", {"only": "meta"}, {})
    meta, arrays = read_container(path)
    assert arrays == {}
    assert meta["only"] == "meta"


def test_zero_length_array(tmp_path):
    path = tmp_path / "zlen.ckpt"
    write_container(path, "generator", {}, {"none": np.empty((0, 4), np.float32)})
    _, arrays = read_container(path)
    assert arrays["none"].shape == (0, 4)
