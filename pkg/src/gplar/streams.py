"""Named random substreams derived from one root seed.

Every consumer of randomness asks for a stream by name (``"sample/3"``,
``"train/step/17"``). The name is hashed with SHA-256 into a
``SeedSequence`` spawn key, and the stream is a Philox counter-based
generator keyed by ``(root_seed, spawn_key)``. Streams with different
names are statistically independent, and a given ``(seed, name)`` pair
always produces the same numbers regardless of the order in which
streams are requested.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _spawn_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, name: str) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_spawn_key(name))
    return np.random.Generator(np.random.Philox(ss))


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
