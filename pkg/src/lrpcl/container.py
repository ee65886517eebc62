"""Manifest + blob container used for checkpoints, relevance maps, priors and gates.

Layout of a container directory::

    manifest.json   format version, free-form metadata, tensor table
    tensors.bin     float32 little-endian values, concatenated in table order

Each tensor-table row carries ``name``, ``shape``, byte ``offset``, byte
``length`` and the ``sha256`` of its slice of the blob.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPE = np.dtype("<f4")


class IntegrityError(IOError):
    """A container's blob does not match its manifest."""


def write_container(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        raw = np.ascontiguousarray(np.asarray(value, dtype=np.float64).astype(_DTYPE)).tobytes()
        table.append(
            {
                "name": name,
                "shape": list(np.shape(value)),
                "offset": offset,
                "length": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "blob": BLOB,
        "meta": dict(meta),
        "tensors": table,
    }
    tmp = path / (BLOB + ".tmp")
    with open(tmp, "wb") as fh:
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_container(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Load every tensor (as float64) and the metadata dict.

    Raises:
        FileNotFoundError: the directory or one of its files is missing.
        IntegrityError: checksum, length or shape disagreement with the manifest.
    """
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported container version {manifest.get('format_version')!r}")
    blob = (path / manifest.get("blob", BLOB)).read_bytes()
    tensors: Dict[str, np.ndarray] = {}
    for row in manifest["tensors"]:
        start, length = row["offset"], row["length"]
        shape = tuple(row["shape"])
        raw = blob[start : start + length]
        if len(raw) != length:
            raise IntegrityError(f"{row['name']}: blob truncated")
        if hashlib.sha256(raw).hexdigest() != row["sha256"]:
            raise IntegrityError(f"{row['name']}: checksum mismatch")
        if length != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize:
            raise IntegrityError(f"{row['name']}: length {length} does not match shape {shape}")
        tensors[row["name"]] = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64).reshape(shape)
    return tensors, manifest["meta"]
