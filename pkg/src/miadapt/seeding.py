"""Named seed derivation.

All randomness in the toolkit flows from a single integer seed through
named derivation, e.g. ``derive_seed(1234, "raug", image_id, paste_idx)``.
No component touches global RNG state, so independent pipeline stages
draw from independent, reproducible streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Map a tuple of names/ints to a stable 63-bit seed via SHA-256."""
    key = "\x1f".join(f"{type(p).__name__}:{p}" for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def derive_rng(*parts: int | str) -> np.random.Generator:
    """A fresh PCG64 generator keyed by the derivation path."""
    return np.random.default_rng(derive_seed(*parts))
