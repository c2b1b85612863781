"""Counter-based random streams with explicit 64-bit seeds.

Every stochastic operation in the package (init, dropout, shuffling, the
synthetic generator) draws from a named stream derived from a root seed.
Philox is counter-based, so a (seed, name) pair always yields the exact
same sequence regardless of platform or call ordering elsewhere, which is
what makes whole training runs bit-reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    """Stable 64-bit key for a stream label (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, label: str = "") -> np.random.Generator:
    """Named Philox stream for ``seed``.

    Distinct labels give statistically independent streams for the same
    seed; the same (seed, label) pair always reproduces the same draws.
    """
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must fit in 64 bits, got {seed}")
    key = np.array([int(seed), _label_key(label)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
