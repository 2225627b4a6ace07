"""
Checkpoint serialization.

A checkpoint directory holds ``manifest.json`` (architecture plus a tensor
manifest) and ``weights.bin``, the concatenation of every tensor as
little-endian raw values in C order. Each manifest entry records name,
shape, dtype, byte offset and byte length.
"""

import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from artifact_store import ArtifactStore
from config import MANIFEST_FILE, WEIGHTS_FILE

logger = logging.getLogger(__name__)

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _tag(array: np.ndarray) -> str:
    return "f64" if array.dtype == np.float64 else "f32"


def pack_tensors(named: Sequence[Tuple[str, np.ndarray]]) -> Tuple[bytes, List[Dict[str, Any]]]:
    """Concatenate arrays into one blob and describe each slice of it."""
    chunks, entries, offset = [], [], 0
    for name, array in named:
        tag = _tag(array)
        raw = np.ascontiguousarray(array, dtype=_DTYPES[tag]).tobytes(order="C")
        entries.append({"name": name, "shape": list(array.shape), "dtype": tag,
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), entries


def unpack_tensors(blob: bytes, entries: Sequence[Dict[str, Any]]) -> Dict[str, np.ndarray]:
    tensors = {}
    for entry in entries:
        end = entry["offset"] + entry["length"]
        if end > len(blob):
            raise ValueError(f"weights blob too short for tensor '{entry['name']}'")
        raw = blob[entry["offset"]:end]
        dtype = _DTYPES[entry["dtype"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).astype(
            dtype.newbyteorder("="), copy=True)
    return tensors


def save_checkpoint(model, store: ArtifactStore, directory: str, extra: Optional[Dict[str, Any]] = None) -> str:
    """
    Write a model checkpoint.

    Args:
        model: Object exposing ``state_dict()``, ``architecture()`` and ``trained``
        store: Artifact store of the run
        directory: Checkpoint directory relative to the run root
        extra: Additional manifest fields

    Returns:
        Path of the manifest
    """
    blob, entries = pack_tensors(list(model.state_dict().items()))
    manifest = {
        "architecture": model.architecture(),
        "trained": bool(getattr(model, "trained", False)),
        "tensors": entries,
    }
    if extra:
        manifest.update(extra)
    store.save_binary_file(directory, WEIGHTS_FILE, blob)
    path = store.save_json(directory, MANIFEST_FILE, manifest)
    logger.info(f"💾 Checkpoint written to {store.get_file_path(directory, '')} ({len(entries)} tensors)")
    return path


def read_checkpoint(store: ArtifactStore, directory: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Return (manifest, tensors by name)."""
    manifest = store.load_json(directory, MANIFEST_FILE)
    blob = store.load_binary_file(directory, WEIGHTS_FILE)
    return manifest, unpack_tensors(blob, manifest["tensors"])
