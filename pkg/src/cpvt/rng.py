"""Named, counter-based random streams.

Every stochastic draw in the package (weight init, data generation, shuffling,
probe inputs) comes from ``stream(seed, name)``. Streams with different names
are independent Philox sequences keyed by ``(seed, hash(name))``, so adding a
new consumer never perturbs the numbers an existing consumer sees.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


def stream(seed: int, name: str) -> np.random.Generator:
    key = np.array([int(seed) & _MASK64, _name_key(name)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def trunc_normal(gen: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)
