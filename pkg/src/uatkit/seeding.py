"""Deterministic named RNG sub-streams.

Every random decision in the pipeline draws from a stream derived from a
single top-level seed plus a stream name, so whole runs replay exactly.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, name))
