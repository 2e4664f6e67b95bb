"""Named-tensor serialization: a JSON manifest plus one little-endian f32 blob.

Layout of a saved directory::

    tensors.json   {"header": {...}, "tensors": [{"name", "shape", "offset"}, ...]}
    tensors.bin    concatenated float32 values, little-endian, row-major

``offset`` is in bytes.  The manifest is written with sorted keys so that
identical content always produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MANIFEST = "tensors.json"
BLOB = "tensors.bin"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """A saved tensor set does not match what the loader expects."""


def save_tensors(directory, tensors: dict[str, np.ndarray], header: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        arr = np.require(np.asarray(arr, dtype=_LE_F32), requirements="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"header": header or {}, "tensors": entries, "total_bytes": offset}
    (directory / BLOB).write_bytes(b"".join(chunks))
    (directory / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CheckpointError(f"no manifest at {path}")
    return json.loads(path.read_text())


def load_tensors(directory) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, header)``; arrays are native-endian float32 copies."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    blob = (directory / BLOB).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(
            f"blob size {len(blob)} does not match manifest total {manifest['total_bytes']}")
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if end > len(blob):
            raise CheckpointError(f"tensor {e['name']!r} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return out, manifest["header"]


def checkpoint_hash(directory) -> str:
    """SHA-256 over manifest and blob bytes."""
    directory = Path(directory)
    h = hashlib.sha256()
    h.update((directory / MANIFEST).read_bytes())
    h.update((directory / BLOB).read_bytes())
    return h.hexdigest()
