"""Deterministic random-number streams.

Every random choice in the simulator flows from a single experiment seed
through named, independent streams. Streams are backed by the counter-based
Philox generator and derived from the root seed plus a path of tokens
(e.g. ``stream(seed, "user", 3, "epoch", 17)``), so results do not depend
on global RNG state or on the order in which streams are consumed.
"""

from __future__ import annotations

import zlib

import numpy as np


def _token(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(root_seed: int, *path) -> np.random.Generator:
    """Return an independent generator for (root_seed, *path).

    The same arguments always yield the same stream; distinct paths yield
    statistically independent streams.
    """
    seq = np.random.SeedSequence(
        entropy=int(root_seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=tuple(_token(p) for p in path),
    )
    return np.random.Generator(np.random.Philox(seq))
