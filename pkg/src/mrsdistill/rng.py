"""Deterministic seed derivation.

Every stochastic stage gets its own stream derived from a master seed and a
tuple of tags (strings or ints), so stages can run in any order or in
parallel without changing results.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag: str | int) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"negative seed tag {tag}")
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def derive_seed(master: int, *tags: str | int) -> int:
    """Return a 63-bit seed that is a pure function of ``master`` and ``tags``."""
    entropy = [int(master) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def make_rng(master: int, *tags: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))
