"""Deterministic seed derivation for per-image, per-stage random streams.

Seeds are derived by hashing a base seed with string parts, so adding or
removing images never shifts another image's stream, and results do not
depend on processing order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base_seed: int, *parts: str) -> int:
    """A 64-bit seed from a base seed and a path of string labels."""
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode())
    for part in parts:
        h.update(b"\x00")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "big")


def rng_for(base_seed: int, *parts: str) -> np.random.Generator:
    """A fresh generator keyed by (base seed, labels)."""
    return np.random.default_rng(np.random.SeedSequence(derive_seed(base_seed, *parts)))
