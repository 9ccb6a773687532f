"""Binary container: bit-exact round-trips and format validation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphhead.containers import FORMAT_VERSION, MAGIC, file_sha256, read_container, write_container
from morphhead.errors import InvalidInputError

DTYPES = [np.float64, np.float32, np.int64, np.int32, np.uint8]


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a": rng.normal(size=(7, 3)),
        "b": rng.integers(0, 255, size=(4, 4, 2)).astype(np.uint8),
        "c": np.array([], dtype=np.float32),
        "d": rng.normal(size=(5,)).astype(np.float32),
    }
    meta = {"kind": "test", "nested": {"x": [1, 2, 3]}}
    path = tmp_path / "t.mhc"
    write_container(path, arrays, meta)
    out, out_meta = read_container(path)
    assert out_meta == meta
    assert set(out) == set(arrays)
    for name, arr in arrays.items():
        assert out[name].dtype == arr.dtype
        assert out[name].shape == arr.shape
        assert out[name].tobytes() == arr.tobytes()


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    shape=st.lists(st.integers(0, 6), min_size=0, max_size=3),
    dtype_idx=st.integers(0, len(DTYPES) - 1),
)
def test_round_trip_property(tmp_path_factory, seed, shape, dtype_idx):
    rng = np.random.default_rng(seed)
    dtype = DTYPES[dtype_idx]
    if np.issubdtype(dtype, np.floating):
        arr = rng.normal(size=shape).astype(dtype)
    else:
        arr = rng.integers(0, 100, size=shape).astype(dtype)
    path = tmp_path_factory.mktemp("c") / "t.mhc"
    write_container(path, {"x": arr}, {"seed": seed})
    out, meta = read_container(path)
    assert meta["seed"] == seed
    assert out["x"].dtype == arr.dtype and out["x"].shape == arr.shape
    assert out["x"].tobytes() == arr.tobytes()


def test_header_layout(tmp_path):
    path = tmp_path / "t.mhc"
    write_container(path, {"x": np.arange(3.0)}, {})
    blob = path.read_bytes()
    assert blob[:4] == MAGIC
    assert int(np.frombuffer(blob[4:8], dtype="<u4")[0]) == FORMAT_VERSION
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    assert blob[16 : 16 + header_len].decode("utf-8").startswith("{")


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.mhc"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(InvalidInputError):
        read_container(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "t.mhc"
    write_container(path, {"x": np.arange(3.0)}, {})
    blob = bytearray(path.read_bytes())
    blob[4:8] = np.uint32(99).tobytes()
    path.write_bytes(bytes(blob))
    with pytest.raises(InvalidInputError):
        read_container(path)


def test_deterministic_bytes_and_hash(tmp_path):
    arrays = {"x": np.arange(12.0).reshape(3, 4), "y": np.ones(2, dtype=np.int32)}
    p1, p2 = tmp_path / "a.mhc", tmp_path / "b.mhc"
    write_container(p1, arrays, {"k": 1})
    write_container(p2, arrays, {"k": 1})
    assert p1.read_bytes() == p2.read_bytes()
    assert file_sha256(p1) == file_sha256(p2)
    write_container(p2, arrays, {"k": 2})
    assert file_sha256(p1) != file_sha256(p2)
