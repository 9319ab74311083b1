"""Counter-based hashing and keyed normal samples.

Every random value in the package is a pure function of an integer key, so
results do not depend on evaluation order and a recomputation (e.g. during
checkpointed backward) reproduces the forward sample bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_PI = 2.0 * np.pi


def splitmix64(x) -> np.ndarray:
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix(*fields) -> np.ndarray:
    """Hash any number of integer fields (scalars or broadcastable arrays) to uint64."""
    with np.errstate(over="ignore"):
        h = np.atleast_1d(np.uint64(0x6A09E667F3BCC908))
        for f in fields:
            f = np.atleast_1d(np.asarray(f).astype(np.int64).astype(np.uint64))
            h = splitmix64(h ^ splitmix64(f))
        return h


def _splitmix64_inplace(z: np.ndarray) -> np.ndarray:
    z += _GOLDEN
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


@lru_cache(maxsize=32)
def _hashed_arange(n: int) -> np.ndarray:
    out = splitmix64(np.arange(n, dtype=np.uint64))
    out.flags.writeable = False
    return out


def _normal_from_hash(h: np.ndarray) -> np.ndarray:
    """Box-Muller on the two 32-bit halves of each hash."""
    u1 = (h >> np.uint64(32)).astype(np.float64)
    u1 += 1.0
    u1 *= 2.0**-32  # (0, 1]
    u2 = (h & np.uint64(0xFFFFFFFF)).astype(np.float64)
    u2 *= _TWO_PI * 2.0**-32
    np.log(u1, out=u1)
    u1 *= -2.0
    np.sqrt(u1, out=u1)
    np.cos(u2, out=u2)
    u1 *= u2
    return u1


@dataclass(frozen=True)
class NoiseKey:
    base_seed: int
    layer_id: int
    batch_index: int
    element_index: int


def gaussian_from_key(key: NoiseKey) -> float:
    return float(gaussian_field(key.base_seed, key.layer_id, key.batch_index, np.array([key.element_index]))[0])


def gaussian_field(base_seed: int, layer_id: int, batch_index: int, shape_or_index) -> np.ndarray:
    """Standard normals for every element index of ``shape`` (or for an explicit index array).

    Element ``i`` of the result equals ``gaussian_from_key(NoiseKey(base_seed,
    layer_id, batch_index, i))``.
    """
    if isinstance(shape_or_index, np.ndarray):
        shape = shape_or_index.shape
        hashed = splitmix64(shape_or_index.reshape(-1).astype(np.int64).astype(np.uint64))
    else:
        shape = tuple(shape_or_index)
        hashed = _hashed_arange(int(np.prod(shape, dtype=np.int64)))
    prefix = mix(base_seed, layer_id, batch_index)
    with np.errstate(over="ignore"):
        h = _splitmix64_inplace(hashed ^ prefix)
    return _normal_from_hash(h).reshape(shape)
