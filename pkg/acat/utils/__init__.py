"""
Utility functions for the ACAT pipeline.
"""

from .file_utils import (
    stable_json_dumps,
    sha256_bytes,
    sha256_file,
    config_hash
)

from .map_utils import (
    channel_max,
    normalize_per_slice,
    upsample_nearest_to,
    volume_max,
    to_pgm
)

from .seeding import derive_run_seeds, stage_seed

__all__ = [
    "stable_json_dumps",
    "sha256_bytes",
    "sha256_file",
    "config_hash",
    "channel_max",
    "normalize_per_slice",
    "upsample_nearest_to",
    "volume_max",
    "to_pgm",
    "derive_run_seeds",
    "stage_seed"
]
