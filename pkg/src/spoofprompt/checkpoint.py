"""Flat checkpoint archive: dotted parameter names -> float64 payloads.

Single-file layout::

    magic   b"SPCKPT01\\n"
    u64-le  byte length of the JSON manifest
    json    {"entries": [{"name", "shape", "offset", "nbytes"}, ...]}
    blob    concatenated raw little-endian float64 payloads (row-major)

The manifest lists every key; payload offsets are relative to the end of
the manifest.  Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"SPCKPT01\n"

__all__ = ["save_checkpoint", "load_checkpoint", "checkpoint_keys", "params_checksum", "MAGIC"]


def _as_array(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def save_checkpoint(params: dict, path) -> None:
    """Write a name->array map; keys are sorted so output is deterministic."""
    entries = []
    payloads = []
    offset = 0
    for name in sorted(params):
        arr = _as_array(params[name])
        raw = arr.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps({"entries": entries}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(manifest).to_bytes(8, "little"))
        f.write(manifest)
        for raw in payloads:
            f.write(raw)


def _read_manifest(f) -> list[dict]:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError("bad checkpoint magic; not a checkpoint archive")
    length = int.from_bytes(f.read(8), "little")
    try:
        manifest = json.loads(f.read(length))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
    return manifest["entries"]


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        entries = _read_manifest(f)
        base = f.tell()
        out = {}
        for e in entries:
            f.seek(base + e["offset"])
            raw = f.read(e["nbytes"])
            if len(raw) != e["nbytes"]:
                raise CheckpointError(f"truncated payload for key '{e['name']}'")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
            out[e["name"]] = arr
    return out


def checkpoint_keys(path) -> list[tuple[str, tuple[int, ...]]]:
    """Manifest view: every key with its shape, in stored order."""
    with open(path, "rb") as f:
        entries = _read_manifest(f)
    return [(e["name"], tuple(e["shape"])) for e in entries]


def params_checksum(params: dict) -> str:
    """SHA-256 over sorted names and raw little-endian payloads."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(_as_array(params[name]).astype("<f8").tobytes())
    return h.hexdigest()
