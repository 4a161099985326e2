"""Versioned binary container for named weight tensors.

Layout: 4-byte magic, little-endian uint32 version, uint32 header length,
UTF-8 JSON header (kind, architecture descriptor, tensor names/shapes,
extra metadata), then the raw little-endian float64 payload of every
tensor in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"ILCP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, arch, weights: dict[str, np.ndarray], extra: dict | None = None):
    names = list(weights.keys())
    header = {
        "kind": kind,
        "arch": arch,
        "tensors": [{"name": n, "shape": list(weights[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(weights[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (kind, arch, weights dict, extra dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    offset = 12 + hlen
    weights = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        weights[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header["kind"], header["arch"], weights, header.get("extra", {})


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
