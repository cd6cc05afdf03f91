"""Deterministic seed derivation.

Every random stream is keyed by (master seed, experiment id, purpose, replica index)
through numpy's SeedSequence, so values never depend on execution order.
"""

from __future__ import annotations

import hashlib

import numpy as np

PURPOSES = {"replica": 0, "environment": 1, "starts": 2, "split": 3, "aux": 4}


def experiment_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def replica_seeds(master: int, n: int, experiment: str = "", purpose: str = "replica") -> np.ndarray:
    """n pairwise-distinct 64-bit seeds for the per-replica generators."""
    ss = np.random.SeedSequence(int(master), spawn_key=(experiment_key(experiment), PURPOSES[purpose]))
    words = ss.generate_state(2 * n, dtype=np.uint32).astype(np.uint64)
    seeds = words[0::2] | (words[1::2] << np.uint64(32))
    # distinctness is overwhelmingly likely; enforce it so the contract is exact
    if len(np.unique(seeds)) != n:
        seeds = seeds ^ np.arange(n, dtype=np.uint64)
    return seeds


def generator(master: int, experiment: str = "", purpose: str = "aux") -> np.random.Generator:
    ss = np.random.SeedSequence(int(master), spawn_key=(experiment_key(experiment), PURPOSES[purpose]))
    return np.random.default_rng(ss)
