"""Deterministic, labelled random sub-streams.

All randomness in the bench flows from one top-level u64 seed.  Each consumer
derives its own counter-based Philox stream keyed by (seed, label) with the
stream index placed in the counter block, so draws are reproducible and
independent of scheduling or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream", "label_key", "derive_seed"]


def label_key(label: str) -> int:
    """Map a stream label to a stable u64 (first 8 bytes of its BLAKE2b digest)."""
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(seed: int, label: str, index: int = 0) -> int:
    """New u64 seed for a named sub-component of `seed` (e.g. per sensor, per level)."""
    payload = seed.to_bytes(8, "little") + index.to_bytes(8, "little") + label.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def substream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Generator for the `index`-th block of the (seed, label) stream.

    Distinct (label, index) pairs never overlap: the label lands in the Philox
    key, the index in the high counter word.
    """
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in u64")
    if index < 0:
        raise ValueError("stream index must be >= 0")
    bits = np.random.Philox(key=[seed, label_key(label)], counter=[0, 0, index, 0])
    return np.random.Generator(bits)
