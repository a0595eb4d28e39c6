"""Checkpoints: a JSON manifest next to one little-endian float64 parameter blob.

The manifest records the format version, configs, step, Rng state and, for
every parameter, its name, shape and offset into the blob. A SHA-256 of the
blob guards against truncation and corruption. Writing is deterministic, so
save -> load -> save reproduces both files byte for byte.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1
MANIFEST = "checkpoint.json"
BLOB = "params.f64"
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype=_DTYPE)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "blob": BLOB,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "n_values": offset,
        "params": index,
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(_dumps(manifest))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version!r}, expected {FORMAT_VERSION}")
    try:
        blob = (path / manifest["blob"]).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob: {exc}") from exc
    if len(blob) != manifest["n_values"] * _DTYPE.itemsize:
        raise CheckpointError(f"corrupt blob: {len(blob)} bytes, expected {manifest['n_values'] * _DTYPE.itemsize}")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError("corrupt blob: checksum mismatch")
    values = np.frombuffer(blob, dtype=_DTYPE)
    params = {}
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        params[entry["name"]] = values[start : start + size].astype(np.float64).reshape(entry["shape"])
    return Checkpoint(params, manifest["config"], manifest["step"], manifest["rng_state"], manifest.get("meta", {}))
