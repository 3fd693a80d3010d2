"""Checkpoint container: magic, version, JSON header, raw little-endian arrays.

Layout: 4 magic bytes "BCRS", a u32 little-endian format version, a u32
little-endian header length, the UTF-8 JSON header, then the raw array bytes.
The header lists (name, shape, offset, dtype) per array in storage order,
offsets relative to the start of the data section, plus a free-form "meta"
object (run config, optimizer step).  Headers are dumped with sorted keys and
no whitespace so that load followed by save reproduces the file bit for bit.
"""
from __future__ import annotations

import json
import struct
from typing import Dict, List, Sequence, Tuple

import numpy as np

MAGIC = b"BCRS"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Sequence[Tuple[str, np.ndarray]], meta: Dict) -> None:
    entries = []
    blobs = []
    offset = 0
    seen = set()
    for name, arr in arrays:
        if name in seen:
            raise CheckpointError(f"duplicate array name {name!r}")
        seen.add(name)
        if arr.dtype == np.float64:
            code = "<f8"
        elif arr.dtype == np.float32:
            code = "<f4"
        else:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": code})
        blobs.append(blob)
        offset += len(blob)
    header = {"arrays": entries, "meta": meta}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Dict]:
    """Returns (arrays in storage order, meta); validates structure as it reads."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated before header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<I", raw, 8)
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from None
    data = raw[header_end:]
    arrays: Dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        name = entry["name"]
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: array {name!r} has unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(data):
            raise CheckpointError(f"{path}: array {name!r} extends past end of file")
        arrays[name] = np.frombuffer(data[start:end], dtype=dtype).reshape(shape).copy()
    return arrays, header.get("meta", {})
