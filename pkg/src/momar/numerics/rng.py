"""Seeded counter-based random streams.

Streams are Philox generators keyed by a hash of the run seed and a stream
path, so ``make_rng(7, "mask")`` is the same sequence in every process and
never collides with ``make_rng(7, "data")``.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, names: tuple) -> int:
    h = hashlib.sha256(repr((int(seed),) + tuple(str(n) for n in names)).encode())
    return int.from_bytes(h.digest()[:16], "little")


def make_rng(seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(seed, names)))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams drawn from ``rng``."""
    keys = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    return [np.random.Generator(np.random.Philox(key=int(k))) for k in keys]
