"""Counter-based seed splitting: every consumer derives its own stream from (seed, *keys)."""
from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode("utf-8"))


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [_key(k) for k in keys]))


def derive_seed(seed: int, *keys) -> int:
    return int(rng_for(seed, *keys).integers(0, 2 ** 31 - 1))
