"""Single-blob parameter checkpoint.

Layout: 8-byte magic "PCMPCKPT", uint32 format version, uint32 header length,
JSON header listing (name, shape, dtype, byte offset, byte length) per tensor,
then the raw row-major tensor payloads in header order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import DomainError

MAGIC = b"PCMPCKPT"
VERSION = 1


def save_params(params: dict, path):
    names = sorted(params.keys())
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name])
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_params(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise DomainError("INVALID_RANGE", f"bad checkpoint magic {magic!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise DomainError("INVALID_RANGE", f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    params = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return params
