"""Binary checkpoint container shared by victim and attacker models.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"NICKPT\\x00\\x01"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H in bytes
    16      H     UTF-8 JSON header: {"kind", "meta", "tensors": [{"name", "shape"}, ...]}
    16+H    ...   float64 little-endian payloads, one per header tensor, in
                  header order, each row-major with prod(shape) values

The header carries everything needed to rebuild the model (architecture
flags, training config); tensors are raw IEEE-754 doubles.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NICKPT\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    header = {
        "kind": kind,
        "meta": meta,
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)


def load(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    offset = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing or missing bytes")
    return header["meta"], tensors
