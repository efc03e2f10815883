"""Deterministic RNG substreams derived from one global seed.

Every random decision in the package draws from a named substream so that,
for example, changing the scene seed never perturbs weight initialization.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(name: str) -> int:
    """Stable 64-bit key for a substream name (sha256-based, platform independent)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for (seed, name); independent of any other named substream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stream_key(name)]))
