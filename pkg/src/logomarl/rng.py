"""Seed derivation: every random stream comes from (top-level seed, purpose tag)."""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, *tags) -> np.random.SeedSequence:
    key = tuple(zlib.crc32(str(t).encode("utf-8")) for t in tags)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Independent generator for ``seed`` and a purpose tag path, e.g. ``rng_for(0, "collect", 3)``."""
    return np.random.default_rng(derive_seed(seed, *tags))
