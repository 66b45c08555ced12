"""Seed stream derivation.

Every random draw in the package comes from ``derive_rng(seed, purpose, *keys)``.
The purpose string is hashed with BLAKE2b so the stream is stable across
processes and Python versions (``hash()`` is salted per process).
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_hash(text: str) -> int:
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed_sequence(seed: int, purpose: str, *keys: int) -> np.random.SeedSequence:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, stable_hash(purpose)]
    entropy.extend(int(k) & 0xFFFFFFFFFFFFFFFF for k in keys)
    return np.random.SeedSequence(entropy)


def derive_rng(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, purpose, keys)``; same inputs, same stream."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, purpose, *keys)))
