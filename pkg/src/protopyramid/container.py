"""Versioned binary tensor container.

Layout: magic, format version, u64 header length, JSON header (metadata plus
a tensor directory of name/dtype/shape/offset), then raw little-endian
payloads in directory order. Writing is byte-deterministic for identical
inputs; loading restores arrays bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PPYC"
VERSION = 1


class ContainerError(ValueError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save(path, tensors: dict, meta: dict | None = None) -> None:
    directory = []
    offset = 0
    arrays = {}
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        arrays[name] = arr
        directory.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
        })
        offset += arr.nbytes
    header = _canonical({"meta": meta or {}, "tensors": directory})
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for entry in directory:
            f.write(arrays[entry["name"]].tobytes())


def load(path) -> tuple[dict, dict]:
    """Returns (tensors, meta)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ContainerError(f"{path}: not a tensor container (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ContainerError(
                f"{path}: container version {version} unsupported (expected {VERSION})"
            )
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        payload = f.read()
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]
