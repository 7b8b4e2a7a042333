"""Checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, a UTF-8 JSON header,
then the raw little-endian float64 payload of every tensor in header order.
The header records each tensor's path, shape and byte offset alongside the
model configuration and RNG state. Keys are sorted so equal inputs give
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MOECKPT1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], header: dict | None = None) -> None:
    index = []
    payload = bytearray()
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f8")
        index.append({"name": name, "shape": list(data.shape), "offset": len(payload), "nbytes": data.nbytes})
        payload += data.tobytes()
    meta = dict(header or {})
    meta["tensors"] = index
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (length,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + length].decode("utf-8"))
    base = 16 + length
    tensors = {}
    for entry in header.pop("tensors"):
        start = base + entry["offset"]
        flat = np.frombuffer(raw[start : start + entry["nbytes"]], dtype="<f8")
        tensors[entry["name"]] = flat.reshape(entry["shape"]).astype(np.float64)
    return tensors, header
