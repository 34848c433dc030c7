"""Self-describing binary container of named arrays.

Layout (all integers little-endian):

    magic   4 bytes  b"GCAP"
    version u32      format version (currently 1)
    fwidth  u8       dominant float width in bytes (4 or 8)
    meta    u16 length + utf8 payload (free-form, e.g. a config hash)
    count   u32      number of records
    record  u16 name length + utf8 name
            u8  dtype code (0 = float32, 1 = float64, 2 = int64)
            u8  ndim
            u64 x ndim dims
            raw little-endian array bytes

Round-trips are bit-exact: payloads are written with ``tobytes`` and read
with ``frombuffer`` at a pinned little-endian dtype.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["ContainerError", "write_container", "read_container"]

_MAGIC = b"GCAP"
_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1, "i8": 2}


class ContainerError(ValueError):
    """Raised on malformed or truncated container files."""


def _dtype_code(arr: np.ndarray) -> int:
    key = f"{arr.dtype.kind}{arr.dtype.itemsize}"
    if key not in _CODE_FOR_KIND:
        raise ContainerError(f"unsupported array dtype {arr.dtype} (use f32, f64, or i64)")
    return _CODE_FOR_KIND[key]


def write_container(path, records: dict[str, np.ndarray], meta: str = "", float_width: int | None = None) -> None:
    path = Path(path)
    # note: np.ascontiguousarray would flatten 0-d arrays to shape (1,),
    # so only strided inputs go through it
    arrays = {name: np.asarray(a) for name, a in records.items()}
    arrays = {
        name: a if a.flags.c_contiguous else np.ascontiguousarray(a)
        for name, a in arrays.items()
    }
    if float_width is None:
        widths = {a.dtype.itemsize for a in arrays.values() if a.dtype.kind == "f"}
        float_width = max(widths) if widths else 4
    meta_b = meta.encode("utf-8")
    if len(meta_b) > 0xFFFF:
        raise ContainerError("metadata string too long")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IBH", _VERSION, float_width, len(meta_b)))
        f.write(meta_b)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise ContainerError(f"record name too long: {name!r}")
            code = _dtype_code(arr)
            le = arr.astype(_DTYPE_CODES[code], copy=False)
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", code, le.ndim))
            for d in le.shape:
                f.write(struct.pack("<Q", d))
            f.write(le.tobytes())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ContainerError("truncated container file")
    return b


def read_container(path) -> tuple[dict[str, np.ndarray], str]:
    """Read back records and the metadata string."""
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _MAGIC:
            raise ContainerError(f"{path}: not a container file (bad magic)")
        version, fwidth, meta_len = struct.unpack("<IBH", _read_exact(f, 7))
        if version != _VERSION:
            raise ContainerError(f"{path}: unsupported container version {version}")
        if fwidth not in (4, 8):
            raise ContainerError(f"{path}: bad float width {fwidth}")
        meta = _read_exact(f, meta_len).decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        records: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(f, 2))
            if code not in _DTYPE_CODES:
                raise ContainerError(f"{path}: unknown dtype code {code} for record {name!r}")
            shape = tuple(struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(ndim))
            dtype = _DTYPE_CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
            count_elems = nbytes // dtype.itemsize
            arr = np.frombuffer(_read_exact(f, nbytes), dtype=dtype, count=count_elems).reshape(shape)
            records[name] = arr.copy()
        return records, meta
