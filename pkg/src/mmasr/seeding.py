"""Purpose-keyed random streams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_rng(seed: int, *purpose) -> np.random.Generator:
    """Independent generator for ``(seed, *purpose)``.

    The same key always yields the same stream, so work split across
    processes or reordered still draws identical numbers.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in purpose))
    return np.random.Generator(np.random.PCG64(ss))
