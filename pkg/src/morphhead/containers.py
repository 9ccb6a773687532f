"""Versioned binary container: JSON header + raw little-endian arrays.

Layout (all integers little-endian):

    bytes 0..3    magic b"MHC1"
    bytes 4..7    format version (uint32)
    bytes 8..15   header length in bytes (uint64)
    header        UTF-8 JSON: {"meta": {...}, "arrays": [{name, dtype,
                  shape, offset, nbytes}, ...]}
    data          concatenated raw array bytes; offsets are relative to
                  the start of the data section

Round-trips are bit-exact: arrays are stored as C-contiguous
little-endian buffers and read back with identical dtype and shape.
Used for the morphable-template file and for training checkpoints.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

MAGIC = b"MHC1"
FORMAT_VERSION = 1


def _le_dtype(arr: np.ndarray) -> np.dtype:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    return dt


def write_container(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON-serializable meta dict to `path`."""
    entries = []
    blobs = []
    offset = 0
    for name in arrays:
        arr = np.asarray(arrays[name])
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        arr = arr.astype(_le_dtype(arr), copy=False)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(FORMAT_VERSION).tobytes())
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container; returns (arrays, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise InvalidInputError(f"{path}: not a morphhead container (bad magic)")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise InvalidInputError(f"{path}: unsupported container version {version}")
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    data = blob[16 + header_len :]
    arrays = {}
    for ent in header["arrays"]:
        start, n = ent["offset"], ent["nbytes"]
        arr = np.frombuffer(data[start : start + n], dtype=np.dtype(ent["dtype"]))
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return arrays, header["meta"]


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
