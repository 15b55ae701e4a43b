"""Seed derivation.

Every random stream in a run is keyed by ``derive_seed(master, *parts)``:
the master seed is passed through splitmix64 and each part (an int, or a
string hashed to 64 bits with BLAKE2b) is xor-folded in followed by another
splitmix64 round. Jobs therefore never share generator state, and running
them serially or in parallel yields the same numbers.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _part_to_int(part) -> int:
    if isinstance(part, (int, np.integer)) and not isinstance(part, bool):
        return int(part) & MASK64
    digest = hashlib.blake2b(str(part).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(master: int, *parts) -> int:
    h = splitmix64(int(master) & MASK64)
    for part in parts:
        h = splitmix64(h ^ _part_to_int(part))
    return h


def rng_for(master: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *parts))
