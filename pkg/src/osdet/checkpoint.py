"""Versioned, byte-deterministic checkpoint container.

Layout: magic, u64 header length, JSON header (sorted keys), then raw
little-endian array payloads at the offsets the header declares. Writing
goes through a temp file plus atomic rename so a partially written
checkpoint is never visible under the target name. Equal states produce
byte-identical files (no timestamps, no compression).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"OSDETCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _array_payload(arrays: dict[str, np.ndarray]):
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float64:
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype == np.int64:
            arr = arr.astype("<i8", copy=False)
        else:
            arr = arr.astype("<f8")
        blob = arr.tobytes()
        entries.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    return entries, b"".join(blobs)


def save_checkpoint(path: Path, arrays: dict[str, np.ndarray], meta: dict):
    """Atomically write arrays plus JSON-serializable metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, payload = _array_payload(arrays)
    header = {"format_version": FORMAT_VERSION, "arrays": entries, "meta": meta}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header_bytes).to_bytes(8, "little"))
            fh.write(header_bytes)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read arrays and metadata; raises CheckpointError on version mismatch."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    n = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 8], "little")
    header_start = len(MAGIC) + 8
    header = json.loads(raw[header_start : header_start + n])
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version mismatch: file has {version}, expected {FORMAT_VERSION}"
        )
    payload_start = header_start + n
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin = payload_start + entry["offset"]
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=begin).reshape(shape)
        arrays[entry["name"]] = arr.copy()
    return arrays, header["meta"]
