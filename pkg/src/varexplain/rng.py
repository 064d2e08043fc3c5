"""Seeded, splittable random streams.

All randomness in the package flows through here. Streams are backed by
numpy's counter-based Philox generator, keyed by a master seed plus a
tuple of integer/string subkeys, so any component can derive an
independent stream without coordinating with the others. Identical
(seed, *keys) always yields an identical stream, on any platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_entropy(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    # strings hash to a stable 64-bit value (builtin hash() is salted)
    h = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Return a Generator for the stream identified by (seed, *keys)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_entropy(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys) -> int:
    """Derive a child 64-bit seed; used to hand seeds across module borders."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_entropy(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
