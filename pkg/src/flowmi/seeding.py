"""Deterministic RNG substream derivation.

All randomness flows from a single master seed. A substream is addressed by
a path of names and integers, e.g. ``substream(seed, "bench", task_id,
"rfmi-trajectory")``. String path parts are hashed with CRC-32 (stable
across platforms and Python versions), integers pass through unchanged, and
the resulting token list seeds a ``numpy.random.SeedSequence``. The same
(master seed, path) pair therefore always yields the same generator, and
distinct paths yield statistically independent streams.
"""

from __future__ import annotations

import zlib

import numpy as np


def _token(part) -> int:
    if isinstance(part, (bool, float)):
        raise TypeError(f"substream path parts must be str or int, got {part!r}")
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"substream path parts must be str or int, got {part!r}")


def seed_sequence(master_seed: int, *path) -> np.random.SeedSequence:
    if master_seed < 0:
        raise ValueError("master seed must be non-negative")
    return np.random.SeedSequence([int(master_seed)] + [_token(p) for p in path])


def substream(master_seed: int, *path) -> np.random.Generator:
    """Generator for the named substream of ``master_seed``."""
    return np.random.default_rng(seed_sequence(master_seed, *path))
