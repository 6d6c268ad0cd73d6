"""Tests for the binary array archive."""

import numpy as np
import pytest

from styleswap import ckpt


def test_roundtrip_mixed_dtypes(tmp_path):
    path = str(tmp_path / "a.ckpt")
    arrays = {
        "w": np.arange(24, dtype=np.float32).reshape(2, 3, 4),
        "step": np.array(17, dtype=np.int64),
        "mask": np.array([1, 0, 1], dtype=np.uint8),
        "moments": np.random.default_rng(0).normal(size=(5, 5)),
    }
    header = {"generator_config": {"num_blocks": 4, "style_dim": 64}, "frozen": ["id.conv1"]}
    ckpt.save_arrays(path, arrays, header)
    back, head = ckpt.load_arrays(path)
    assert set(back) == set(arrays)
    for name in arrays:
        assert back[name].shape == arrays[name].shape
        assert np.array_equal(back[name], arrays[name])
    assert head["generator_config"] == header["generator_config"]
    assert head["frozen"] == ["id.conv1"]
    assert head["format_version"] == ckpt.FORMAT_VERSION


def test_little_endian_on_disk(tmp_path):
    path = str(tmp_path / "le.ckpt")
    big = np.array([1.0, 2.0], dtype=">f8")
    ckpt.save_arrays(path, {"x": big})
    back, head = ckpt.load_arrays(path)
    assert np.array_equal(back["x"], np.array([1.0, 2.0]))
    assert head["entries"][0]["dtype"] == "<f8"
    with open(path, "rb") as fh:
        raw = fh.read()
    assert np.array(1.0, dtype="<f8").tobytes() in raw


def test_rejects_bad_magic(tmp_path):
    path = str(tmp_path / "junk.ckpt")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        ckpt.load_arrays(path)


def test_rejects_unknown_version(tmp_path):
    path = str(tmp_path / "v.ckpt")
    ckpt.save_arrays(path, {"x": np.zeros(2, dtype=np.float32)})
    raw = bytearray(open(path, "rb").read())
    raw[4:8] = np.uint32(ckpt.FORMAT_VERSION + 1).tobytes()
    with open(path, "wb") as fh:
        fh.write(raw)
    with pytest.raises(ValueError, match=str(ckpt.FORMAT_VERSION + 1)):
        ckpt.load_arrays(path)


def test_rejects_truncated_file(tmp_path):
    path = str(tmp_path / "t.ckpt")
    ckpt.save_arrays(path, {"x": np.ones(100, dtype=np.float64)})
    raw = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(raw[:-40])
    with pytest.raises(ValueError, match="truncated"):
        ckpt.load_arrays(path)


def test_rejects_object_arrays(tmp_path):
    with pytest.raises(ValueError, match="dtype"):
        ckpt.save_arrays(str(tmp_path / "o.ckpt"), {"x": np.array(["a", "b"])})
