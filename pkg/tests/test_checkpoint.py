"""Array container format: round trips, byte stability, corruption checks."""

import numpy as np
import pytest

from gridplan.checkpoint import CheckpointError, load_arrays, save_arrays


def _sample_arrays():
    rng = np.random.default_rng(0)
    return {
        "weights": rng.standard_normal((4, 7)).astype(np.float32),
        "ids": np.arange(12, dtype=np.int64).reshape(3, 4),
        "flag": np.array(True),
        "empty": np.zeros((0, 5), dtype=np.float64),
    }


def test_round_trip(tmp_path):
    path = tmp_path / "a.gpck"
    header = {"kind": "test", "nested": {"lr": 1e-4, "steps": [1, 2]}}
    arrays = _sample_arrays()
    save_arrays(path, header, arrays)
    h2, a2 = load_arrays(path)
    assert h2 == header
    assert set(a2) == set(arrays)
    for name in arrays:
        assert a2[name].dtype == arrays[name].dtype
        assert a2[name].shape == arrays[name].shape
        assert np.array_equal(a2[name], arrays[name])


def test_byte_stable_across_writes_and_key_order(tmp_path):
    arrays = _sample_arrays()
    p1, p2 = tmp_path / "1.gpck", tmp_path / "2.gpck"
    save_arrays(p1, {"b": 2, "a": 1}, arrays)
    save_arrays(p2, {"a": 1, "b": 2}, dict(reversed(list(arrays.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_arrays_are_writable_copies(tmp_path):
    path = tmp_path / "a.gpck"
    save_arrays(path, {}, {"x": np.zeros(3)})
    _, arrays = load_arrays(path)
    arrays["x"][0] = 5  # must not raise


def test_corruption_detected(tmp_path):
    path = tmp_path / "a.gpck"
    save_arrays(path, {"kind": "test"}, _sample_arrays())
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_arrays(path)


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "a.gpck"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_arrays(path)


def test_scalar_and_fortran_order(tmp_path):
    path = tmp_path / "a.gpck"
    f_ordered = np.asfortranarray(np.arange(6, dtype=np.float32).reshape(2, 3))
    save_arrays(path, {}, {"s": np.float64(3.5), "f": f_ordered})
    _, arrays = load_arrays(path)
    assert arrays["s"].shape == () and arrays["s"] == 3.5
    assert np.array_equal(arrays["f"], f_ordered)
