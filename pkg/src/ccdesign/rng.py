"""Seeded random streams keyed by purpose and index."""
import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    k = int(k)
    if k < 0:
        raise ValueError("stream keys must be non-negative")
    return k


def rng_stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; same inputs, same stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([_key(seed), *map(_key, keys)])))
