"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic b"SXPT"
    bytes 4..7    uint32 format version (currently 1)
    bytes 8..11   uint32 header length H
    bytes 12..12+H  header JSON (UTF-8, sorted keys) with
                    {"arrays": [{name, dtype, shape, offset, nbytes}, ...],
                     "meta": {...}}
    remainder     raw array bytes; offsets are relative to the data section

Arrays are stored contiguously in name order with non-overlapping offsets;
``load`` reproduces every array bit-identically. Metadata carries the config
snapshot, seed and iteration count (never wall-clock time, so checkpoints
from identical runs are byte-identical).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "FORMAT_VERSION", "MAGIC"]

MAGIC = b"SXPT"
FORMAT_VERSION = 1
_ALLOWED_DTYPES = {"<f8", "<f4", "<i8"}


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files."""


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(int(FORMAT_VERSION).to_bytes(4, "little"))
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = int.from_bytes(raw[4:8], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    header_len = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    data = raw[12 + header_len :]
    arrays: dict[str, np.ndarray] = {}
    spans: list[tuple[int, int]] = []
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        for s, e in spans:
            if start < e and s < start + nbytes:
                raise CheckpointError(f"{path}: overlapping array offsets in table")
        spans.append((start, start + nbytes))
        if entry["dtype"] not in _ALLOWED_DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']}")
        arr = np.frombuffer(data[start : start + nbytes], dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays, header["meta"]
