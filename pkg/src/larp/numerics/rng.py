"""Splittable, counter-based random streams.

A stream is identified by ``(seed, *path)``; the same identifier always
yields the same Philox sequence, so a training step can derive its
randomness from ``(seed, "step", k)`` without carrying generator state.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(x) -> int:
    if isinstance(x, (int, np.integer)):
        if x < 0:
            raise ValueError("stream tags must be non-negative")
        return int(x)
    return zlib.crc32(str(x).encode("utf-8"))


def stream(seed: int, *path) -> np.random.Generator:
    """Independent generator for the stream ``(seed, *path)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_tag(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def split(rng: np.random.Generator, count: int) -> list[np.random.Generator]:
    """Derive ``count`` child generators from ``rng`` (advances ``rng``)."""
    keys = rng.integers(0, 2**63, size=count, dtype=np.int64)
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence(int(k)))) for k in keys]
