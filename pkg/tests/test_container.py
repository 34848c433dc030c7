"""Binary container round-trips and corruption handling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geocaps.container import ContainerError, read_container, write_container


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    records = {
        "weights": rng.standard_normal((4, 5)).astype(np.float32),
        "poses": rng.standard_normal((2, 7)),
        "counts": np.arange(6, dtype=np.int64).reshape(2, 3),
        "scalar": np.float64(1.5) * np.ones(()),
    }
    path = tmp_path / "model.ckpt"
    write_container(path, records, meta="hello world")
    back, meta = read_container(path)
    assert meta == "hello world"
    assert set(back) == set(records)
    for name, arr in records.items():
        assert back[name].dtype == arr.dtype
        assert back[name].shape == arr.shape
        assert np.array_equal(
            np.asarray(back[name]).tobytes(), np.asarray(arr).tobytes()
        )


def test_rewrite_is_byte_identical(tmp_path):
    arr = np.linspace(0, 1, 11)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    write_container(a, {"x": arr}, meta="m")
    write_container(b, {"x": arr}, meta="m")
    assert a.read_bytes() == b.read_bytes()


def test_empty_records(tmp_path):
    path = tmp_path / "empty.bin"
    write_container(path, {}, meta="")
    back, meta = read_container(path)
    assert back == {} and meta == ""


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ContainerError, match="magic"):
        read_container(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "model.ckpt"
    write_container(path, {"x": np.ones(100)}, meta="")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 37])
    with pytest.raises(ContainerError, match="truncated"):
        read_container(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"GCAP\x01")
    with pytest.raises(ContainerError, match="truncated"):
        read_container(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ContainerError, match="dtype"):
        write_container(tmp_path / "x.bin", {"x": np.ones(3, dtype=np.complex128)})


def test_unknown_version_rejected(tmp_path):
    path = tmp_path / "v9.bin"
    write_container(path, {"x": np.ones(2)})
    raw = bytearray(path.read_bytes())
    raw[4] = 9  # bump the little-endian version field
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="version"):
        read_container(path)


def test_non_contiguous_input_round_trips(tmp_path):
    base = np.arange(24, dtype=np.float64).reshape(4, 6)
    view = base[:, ::2]
    path = tmp_path / "strided.bin"
    write_container(path, {"v": view})
    back, _ = read_container(path)
    assert np.array_equal(back["v"], view)


@settings(max_examples=25, deadline=None)
@given(
    shape=st.lists(st.integers(0, 5), min_size=0, max_size=3).map(tuple),
    seed=st.integers(0, 2**31),
    meta=st.text(max_size=50),
)
def test_round_trip_property(tmp_path_factory, shape, seed, meta):
    arr = np.random.default_rng(seed).standard_normal(shape)
    path = tmp_path_factory.mktemp("c") / "r.bin"
    write_container(path, {"r": arr}, meta=meta)
    back, meta_back = read_container(path)
    assert meta_back == meta
    assert back["r"].shape == arr.shape
    assert np.array_equal(back["r"], arr)
