"""Checkpoint container.

Layout: ``b"DKT1"``, an unsigned 64-bit little-endian manifest length, the
UTF-8 JSON manifest, then the raw little-endian tensor blobs at the offsets
the manifest records (relative to the start of the blob section).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"DKT1"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray], config: Mapping[str, Any] | None = None,
                 extra: Mapping[str, Any] | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"config": dict(config or {}), "tensors": entries, "extra": dict(extra or {})}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Returns ``(tensors, manifest)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    (n,) = struct.unpack("<Q", buf[4:12])
    manifest = json.loads(buf[12:12 + n].decode("utf-8"))
    base = 12 + n
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        raw = buf[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated blob for {e['name']}")
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        tensors[e["name"]] = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return tensors, manifest
