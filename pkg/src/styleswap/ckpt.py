"""Versioned binary archive of named numeric arrays.

Layout: 4-byte magic, little-endian uint32 format version, little-endian
uint64 JSON header length, the UTF-8 JSON header, then the raw array blobs
back to back. The header carries caller metadata (model config, step, frozen
parameter names) plus the entry table: name, shape, element type, byte offset
into the blob region. All on-disk data is little-endian regardless of host
byte order. Loading rejects unknown format versions.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"SSWP"
FORMAT_VERSION = 1

_ALLOWED_KINDS = "fiub"  # float, int, unsigned, bool


def _le_dtype(arr: np.ndarray) -> np.dtype:
    dt = arr.dtype
    if dt.kind not in _ALLOWED_KINDS:
        raise ValueError(f"unsupported array dtype {dt}")
    return dt.newbyteorder("<")


def save_arrays(path: str, arrays: dict[str, np.ndarray], header: dict | None = None):
    """Write named arrays plus a JSON-serializable header record."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = _le_dtype(arr)
        blob = arr.astype(dt, copy=False).tobytes()  # tobytes serializes in C order
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    head = dict(header or {})
    head["format_version"] = FORMAT_VERSION
    head["entries"] = entries
    head_bytes = json.dumps(head).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(FORMAT_VERSION).tobytes())
        fh.write(np.uint64(len(head_bytes)).tobytes())
        fh.write(head_bytes)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive written by save_arrays; returns (arrays, header)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        head_len = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        header = json.loads(fh.read(head_len).decode("utf-8"))
        data = fh.read()
    arrays = {}
    for entry in header["entries"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + count * dt.itemsize
        if stop > len(data):
            raise ValueError(f"checkpoint truncated: entry {entry['name']} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(data[start:stop], dtype=dt).reshape(shape).copy()
    return arrays, header
