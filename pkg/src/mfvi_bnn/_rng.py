"""Index-addressed random streams.

Every stochastic routine in the package draws from a stream derived from
``(seed, *keys)`` so results do not depend on evaluation order.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the key path ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def children(rng, count: int) -> list[np.random.Generator]:
    """``count`` child streams, child ``k`` depending only on the parent seed and ``k``."""
    if isinstance(rng, (int, np.integer)):
        return [stream(int(rng), k) for k in range(count)]
    return as_generator(rng).spawn(count)
