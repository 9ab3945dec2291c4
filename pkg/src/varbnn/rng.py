"""Seedable, splittable random streams.

Every stochastic routine takes an explicit ``numpy.random.Generator``. Streams
are backed by the counter-based Philox bit generator and derived from a
``SeedSequence`` so child streams are statistically independent.
"""
from __future__ import annotations

import numpy as np


def make_stream(seed: int | np.random.SeedSequence) -> np.random.Generator:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def split(seed: int, n: int) -> list[np.random.Generator]:
    """Return ``n`` independent streams derived from ``seed``."""
    return [make_stream(child) for child in np.random.SeedSequence(seed).spawn(n)]


def spawn(stream: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split an existing stream into ``n`` independent children."""
    return [np.random.Generator(np.random.Philox(s)) for s in stream.bit_generator.seed_seq.spawn(n)]
