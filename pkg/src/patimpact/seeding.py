"""Deterministic seed derivation.

Every stage/component RNG seed is a stable hash of the global seed plus a
name path, so one seed reproduces an entire run and components stay
independent of each other's draw counts.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *names: str) -> int:
    """64-bit seed from (seed, names...) via blake2b; stable across runs."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(name.encode())
    return int.from_bytes(h.digest(), "big")


def derived_rng(seed: int, *names: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
