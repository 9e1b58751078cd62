"""Portable checkpoint archives: a JSON header plus named, row-major arrays.

Layout: 8-byte magic, uint32 version, uint64 header length, canonical JSON
header, then the raw little-endian array bytes back to back. Serialization
is canonical (sorted keys, arrays ordered by name), so saving the same
weights twice yields byte-identical files, and load -> save round-trips
exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

MAGIC = b"NLBUNDLE"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Archive:
    arrays: Dict[str, np.ndarray]
    descriptor: Optional[dict] = None
    provenance: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_archive(path, archive: Archive) -> None:
    names = sorted(archive.arrays)
    index = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(archive.arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.str.lstrip("=|<"),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        offset += len(blob)
        blobs.append(blob)
    header = _canonical(
        {
            "arrays": index,
            "descriptor": archive.descriptor,
            "provenance": archive.provenance,
            "meta": archive.meta,
        }
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_archive(path) -> Archive:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint archive")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported archive version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        raw = fh.read(header_len)
        if len(raw) != header_len:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        data = fh.read()
    expected = sum(item["nbytes"] for item in header["arrays"])
    if len(data) != expected:
        raise CheckpointError(f"{path}: payload is {len(data)} bytes, expected {expected}")
    arrays = {}
    for item in header["arrays"]:
        start, nbytes = item["offset"], item["nbytes"]
        dtype = np.dtype(item["dtype"])
        arr = np.frombuffer(data[start : start + nbytes], dtype=dtype)
        arrays[item["name"]] = arr.reshape(item["shape"]).copy()
    return Archive(
        arrays=arrays,
        descriptor=header.get("descriptor"),
        provenance=header.get("provenance") or {},
        meta=header.get("meta") or {},
    )
