"""Index-derived random streams.

Every random draw in the package comes from a Philox (counter-based)
generator keyed by ``(seed, tag, *indices)``. Two calls with the same key
always produce the same stream, whatever order or thread they run in.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


class StreamFactory:
    """Derive independent generators from a 64-bit master seed."""

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed) & _MASK64

    def generator(self, tag: str, *indices: int) -> np.random.Generator:
        key = (tag_id(tag),) + tuple(int(i) for i in indices)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"StreamFactory(seed={self.seed})"
