"""
Tests for the binary array container.

Run directly:
    python tests/test_container.py

Or with pytest:
    pytest tests/test_container.py -v
"""

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.container import MAGIC, load_arrays, save_arrays
from src.errors import ContainerError


def test_arrays_and_attrs_survive(tmp_path):
    arrays = {
        "weights": np.arange(12, dtype=np.float32).reshape(3, 4) / 7,
        "ids": np.array([[0, 5, -3]], dtype=np.int64),
        "scalar": np.float32(2.5),
    }
    path = save_arrays(tmp_path / "a.hgar", arrays, attrs={"preset": "desk", "step": 10})
    bundle = load_arrays(path)

    assert bundle.attrs == {"preset": "desk", "step": 10}
    assert np.array_equal(bundle["weights"], arrays["weights"])
    assert bundle["ids"].dtype == np.int32
    assert np.array_equal(bundle["ids"], [[0, 5, -3]])
    assert bundle["scalar"].shape == ()
    assert "weights" in bundle and "missing" not in bundle


def test_float64_is_stored_as_float32(tmp_path):
    values = np.array([0.1, 1e-9, 3.0])
    bundle = load_arrays(save_arrays(tmp_path / "f.hgar", {"x": values}))
    assert bundle["x"].dtype == np.float32
    assert np.array_equal(bundle["x"], values.astype(np.float32))


def test_same_input_gives_same_bytes(tmp_path):
    arrays = {"b": np.ones((2, 2)), "a": np.zeros(3, dtype=np.int32)}
    first = save_arrays(tmp_path / "1.hgar", arrays, {"seed": 1}).read_bytes()
    second = save_arrays(tmp_path / "2.hgar", dict(reversed(list(arrays.items()))), {"seed": 1}).read_bytes()
    assert first == second
    assert first.startswith(MAGIC)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.hgar"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ContainerError, match="bad magic"):
        load_arrays(path)


def test_truncated_file_rejected(tmp_path):
    path = save_arrays(tmp_path / "t.hgar", {"x": np.ones(100, dtype=np.float32)})
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ContainerError, match="Truncated"):
        load_arrays(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ContainerError, match="unsupported dtype"):
        save_arrays(tmp_path / "c.hgar", {"z": np.array([1 + 2j])})


def test_missing_file_and_array(tmp_path):
    with pytest.raises(ContainerError):
        load_arrays(tmp_path / "nothing.hgar")
    bundle = load_arrays(save_arrays(tmp_path / "e.hgar", {}))
    with pytest.raises(ContainerError, match="not found"):
        bundle["x"]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
