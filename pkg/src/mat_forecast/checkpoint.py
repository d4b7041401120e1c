"""Manifest + blob array storage.

``<stem>.json`` lists every array's name, shape, byte offset and element count;
``<stem>.bin`` holds the values back to back as little-endian float64.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_arrays(stem, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    """Write ``arrays`` in insertion order. Returns the manifest path."""
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=_DTYPE)
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)}
        )
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "version": FORMAT_VERSION,
        "dtype": "float64-le",
        "blob": blob_path.name,
        "tensors": entries,
        "meta": dict(meta or {}),
    }
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_arrays(stem) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    manifest_path, blob_path = _paths(stem)
    try:
        manifest = json.loads(manifest_path.read_text())
        blob = blob_path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {manifest_path}: {exc}") from None
    if "version" not in manifest:
        raise DataError(f"{manifest_path}: manifest has no version field")
    if manifest["version"] != FORMAT_VERSION:
        raise DataError(f"{manifest_path}: unsupported version {manifest['version']}")
    arrays = {}
    for entry in manifest["tensors"]:
        start, count = entry["offset"], entry["count"]
        end = start + count * _DTYPE.itemsize
        if end > len(blob):
            raise DataError(f"{blob_path}: truncated blob at tensor {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype=_DTYPE).astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return arrays, manifest.get("meta", {})
