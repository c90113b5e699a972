"""Seeded random streams.

Every stochastic stage draws from a PCG64 generator built from
``SeedSequence(seed, spawn_key=(stage_key, index))``. The stage key is a
CRC32 of a stage name, so a stage (or one tree, one series, one restart)
can be replayed in isolation and results do not depend on scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np

STAGES = ("generation", "split", "forest", "clustering", "tree")


def stage_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, stage: str, *index: int) -> np.random.Generator:
    """Return the generator for ``stage`` and a tuple of integer indices."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(stage_key(stage), *map(int, index)))
    return np.random.Generator(np.random.PCG64(ss))
