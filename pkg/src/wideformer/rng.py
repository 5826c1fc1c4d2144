"""Keyed random streams.

Every stochastic quantity in the package draws from a generator keyed by
``(seed, purpose, *index)``.  Two calls with the same key always produce the
same numbers, regardless of which other streams were consumed before, so
Monte-Carlo loops can be split, reordered or run in parallel without changing
a single bit of the result.
"""
from __future__ import annotations

import zlib

import numpy as np


def _purpose_word(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    """Return an independent Philox generator for the key ``(seed, purpose, index...)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = [int(seed), _purpose_word(purpose), *(int(i) for i in index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
