"""
Saliency map artifacts.

Each map is written as ``NNNN.f32`` (raw little-endian [S, 1, H, W]),
``NNNN.pgm`` (8-bit preview of the slice maximum) and ``NNNN.json``
(method, source model, class target and metadata). A directory manifest
lists the sample indices.
"""

import logging
from pathlib import Path as FilePath
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from artifact_store import ArtifactStore
from config import MANIFEST_FILE
from counterfactual import CounterfactualTrace, SaliencyMap
from utils.map_utils import to_pgm

logger = logging.getLogger(__name__)

MAP_FORMAT = "acat-saliency/1"
TRACES_DIR = "traces"


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def map_filenames(index: int) -> Tuple[str, str, str]:
    stem = f"{index:04d}"
    return f"{stem}.f32", f"{stem}.pgm", f"{stem}.json"


def write_saliency_map(store: ArtifactStore, directory: str, index: int, saliency: SaliencyMap,
                       traces: Optional[Sequence[CounterfactualTrace]] = None) -> List[str]:
    """Write one map (and its counterfactual traces as JSON lines); returns the relative paths written."""
    raw_name, pgm_name, meta_name = map_filenames(index)
    store.save_binary_file(directory, raw_name, np.ascontiguousarray(saliency.values, dtype="<f4").tobytes())
    store.save_binary_file(directory, pgm_name, to_pgm(saliency.reduced()))
    store.save_json(directory, meta_name, {
        "index": int(index),
        "method": saliency.method,
        "source_model": saliency.source_model,
        "class_target": _jsonable(saliency.class_target),
        "shape": list(saliency.values.shape),
        "metadata": _jsonable(saliency.metadata),
    })
    written = [raw_name, pgm_name, meta_name]
    for trace in traces or []:
        name = f"{TRACES_DIR}/{index:04d}_to{trace.target_class}.jsonl"
        store.save_file(directory, name, trace.to_jsonl())
        written.append(name)
    return written


def write_map_manifest(store: ArtifactStore, directory: str, method: str, source: str,
                       indices: Sequence[int], shape: Sequence[int]) -> str:
    store.save_json(directory, MANIFEST_FILE, {
        "format": MAP_FORMAT,
        "method": method,
        "source": source,
        "indices": [int(i) for i in indices],
        "shape": list(shape),
    })
    return MANIFEST_FILE


def read_saliency_map(store: ArtifactStore, directory: str, index: int,
                      shape: Optional[Sequence[int]] = None) -> SaliencyMap:
    """
    Read one map; without a metadata sidecar, ``shape`` is required and the method is 'external'.
    """
    raw_name, _, meta_name = map_filenames(index)
    if store.file_exists(directory, meta_name):
        meta = store.load_json(directory, meta_name)
        shape = meta["shape"]
    elif shape is None:
        raise FileNotFoundError(f"Expected artifact not found: {store.get_file_path(directory, meta_name)}")
    else:
        meta = {"method": "external", "source_model": "unknown", "class_target": None, "metadata": {}}
    values = np.frombuffer(store.load_binary_file(directory, raw_name), dtype="<f4")
    expected = int(np.prod(shape))
    if values.size != expected:
        raise ValueError(f"{store.get_file_path(directory, raw_name)} holds {values.size} values, expected {expected}")
    target = meta["class_target"]
    return SaliencyMap(values.reshape(shape).astype(np.float32), meta["method"], meta["source_model"],
                       tuple(target) if isinstance(target, list) else target, meta["metadata"])


def load_saliency_directory(store: ArtifactStore, directory: str) -> Dict[int, SaliencyMap]:
    """All maps listed in a directory manifest, by sample index."""
    manifest = store.load_json(directory, MANIFEST_FILE)
    return {int(i): read_saliency_map(store, directory, int(i), manifest["shape"]) for i in manifest["indices"]}


def scan_map_files(store: ArtifactStore, directory: str) -> List[int]:
    """Sample indices of the ``NNNN.f32`` files in a directory."""
    indices = []
    for name in store.list_files(directory, ".f32"):
        stem = FilePath(name).stem
        if stem.isdigit():
            indices.append(int(stem))
    return indices
