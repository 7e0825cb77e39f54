"""Splittable, counter-based random streams.

Every stochastic routine in the package takes an explicit ``numpy`` Generator.
Streams are derived from a root seed plus a tuple of integer stream ids, so
parallel consumers get disjoint, reproducible streams without sharing state.
The underlying bit generator is Philox (counter-based), keyed through a
``SeedSequence`` so that ``(seed, stream ids)`` fully determines the stream.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *ids: int) -> np.random.Generator:
    """Return a fresh generator for the stream keyed by ``(seed, *ids)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(i) for i in ids))
    return np.random.Generator(np.random.Philox(ss))
