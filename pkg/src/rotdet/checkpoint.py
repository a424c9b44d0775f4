"""Flat binary checkpoint container.

Layout (all integers little-endian):

    bytes 0-3   magic ``RDCP``
    bytes 4-7   format version (uint32), currently 1
    bytes 8-15  header length in bytes (uint64)
    header      UTF-8 JSON: {"meta": {...}, "tensors": [
                    {"name": str, "dtype": numpy dtype string,
                     "shape": [int, ...], "offset": int}, ...]}
    data        raw row-major tensor bytes, little-endian, at the stated
                offsets relative to the start of the data section

``meta`` is free-form JSON for training state (epoch, rng state, config).
"""

from __future__ import annotations

import json
import os
import struct
from typing import Any

import numpy as np

MAGIC = b"RDCP"
VERSION = 1


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    """Write tensors and metadata atomically (temp file + rename)."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a checkpoint back as (arrays, meta)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        data = f.read()
    arrays: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = ent["offset"]
        arr = np.frombuffer(data, dtype=dt, count=n, offset=start)
        arrays[ent["name"]] = arr.reshape(ent["shape"]).astype(ent["dtype"])
    return arrays, header["meta"]
