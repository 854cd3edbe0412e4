"""Named, seedable, splittable random streams.

Every stochastic consumer receives an explicit ``numpy.random.Generator``.
Streams are derived from a root seed plus a path of names, so adding a new
consumer never shifts the draws seen by an existing one.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """Generator for the stream ``seed/names[0]/names[1]/...``."""
    entropy = [int(seed)] + [_name_key(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Spawn ``n`` independent child generators from ``rng``."""
    return list(rng.spawn(n))
