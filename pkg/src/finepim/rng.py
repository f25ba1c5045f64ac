"""Seeded RNG streams keyed by (seed, purpose tag, extra ints).

Streams never depend on the order in which they are requested, so per-record
work can run in any order and still reproduce.
"""

import zlib

import numpy as np


def stream(seed: int, tag: str, *extra: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode("utf-8"))]
    entropy.extend(int(e) & 0xFFFFFFFF for e in extra)
    return np.random.default_rng(np.random.SeedSequence(entropy))
