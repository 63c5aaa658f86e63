"""
Seed derivation: every random stream flows from one master seed
"""

import hashlib

import numpy as np


def substream_seed(master_seed: int, name: str) -> int:
    """
    Derive an independent named seed from the master seed

    Args:
        master_seed: Run-wide seed
        name: Sub-stream name (world, split, sampler, pipeline, regressor, eval)

    Returns:
        63-bit integer seed
    """
    digest = hashlib.sha256(f"{master_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derive_seed(*keys: int) -> int:
    """Integer seed for a tuple of non-negative integer keys"""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0] >> 1)


def stream(*keys: int) -> np.random.Generator:
    """Generator keyed by a tuple of non-negative integers"""
    return np.random.default_rng([int(k) for k in keys])
