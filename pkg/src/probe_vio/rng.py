"""Named random streams derived from one integer seed."""

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; identical inputs give identical streams."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode()), *map(int, extra)])


def substream_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(0, 2**31 - 1))
