"""
File and hashing helpers shared by the pipeline stages.
"""

import hashlib
import json
from typing import Any

from pydantic import BaseModel


def stable_json_dumps(payload: Any) -> str:
    """
    Serialize to JSON with sorted keys and fixed separators so equal payloads give equal bytes.

    Args:
        payload: JSON-compatible value or pydantic model

    Returns:
        JSON text terminated by a newline
    """
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return json.dumps(payload, sort_keys=True, indent=2, separators=(",", ": ")) + "\n"


def sha256_bytes(content: bytes) -> str:
    return hashlib.sha256(content).hexdigest()


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(payload: Any) -> str:
    """SHA-256 of the canonical JSON form of a config (sub)section."""
    return sha256_bytes(stable_json_dumps(payload).encode("utf-8"))
