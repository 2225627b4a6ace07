"""
Seed derivation. Every random stream in a run descends from the master seed.
"""

import zlib
from typing import List

import numpy as np


def derive_run_seeds(master_seed: int, n_runs: int) -> List[int]:
    """Independent per-run seeds from the master seed."""
    children = np.random.SeedSequence(master_seed).spawn(n_runs)
    return [int(child.generate_state(1)[0]) for child in children]


def stage_seed(run_seed: int, stage: str) -> int:
    """Seed for one stage of one run; the stage name is folded into the entropy."""
    sequence = np.random.SeedSequence([run_seed, zlib.crc32(stage.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])
