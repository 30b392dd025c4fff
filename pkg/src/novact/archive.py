"""Deterministic tensor archive: JSON header plus raw little-endian buffers.

Unlike zip-based containers this format embeds no timestamps, so re-running a
pipeline with the same seeds reproduces artifacts byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"NVTA"
VERSION = 1


def save_tensors(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": VERSION, "meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: no such file")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ParseError(f"{path}: not a tensor archive")
    (header_len,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ParseError(f"{path}: unsupported archive version {header.get('version')}")
    base = 12 + header_len
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        buf = raw[start : start + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    return header["meta"], tensors
