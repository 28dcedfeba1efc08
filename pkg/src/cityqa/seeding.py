"""Deterministic RNG derivation from structured keys.

Python's builtin hash() is salted per process, so independent streams for
scenes / samples / stages are derived from a SHA-256 digest of the key parts
instead. Same parts in, same stream out, on any platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of printable parts to a stable 64-bit seed."""
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    """Independent PCG64 generator keyed by ``parts``."""
    return np.random.default_rng(derive_seed(*parts))
