"""Portable, splittable random streams.

Every random quantity in the package is drawn from a stream identified by a
64-bit seed.  The algorithm is fixed so that ports in other languages can
reproduce the streams bit for bit:

* ``seed_split(seed, stream_id)`` = first 8 bytes (little endian) of
  ``SHA-256(b"gpdiff/split/v1" || le64(seed) || le64(stream_id))``.
* A stream with seed ``k`` is Philox4x64-10 keyed with ``k`` (counter starts
  at zero), read as raw 64-bit words.
* A uniform is ``((w >> 11) + 0.5) * 2**-53``, which lies strictly in (0, 1).
* A standard normal is the inverse normal CDF of that uniform.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np
from scipy.special import ndtri

MASK64 = (1 << 64) - 1
_SPLIT_TAG = b"gpdiff/split/v1"


def seed_split(seed: int, stream_id: int) -> int:
    """Derive the child seed of ``seed`` for ``stream_id``."""
    payload = _SPLIT_TAG + struct.pack("<QQ", seed & MASK64, stream_id & MASK64)
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def seed_path(seed: int, *stream_ids: int) -> int:
    """Apply :func:`seed_split` repeatedly, e.g. ``seed_path(s, TRUTH, i)``."""
    for sid in stream_ids:
        seed = seed_split(seed, sid)
    return seed


def raw_words(seed: int, count: int) -> np.ndarray:
    bitgen = np.random.Philox(key=seed & MASK64)
    return bitgen.random_raw(count)


def uniforms(seed: int, count: int) -> np.ndarray:
    words = raw_words(seed, count)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(seed: int, shape) -> np.ndarray:
    """Standard normal draws of ``shape`` from the stream ``seed``."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    count = int(np.prod(shape, dtype=np.int64))
    return ndtri(uniforms(seed, count)).reshape(shape)


def stacked_normals(seed: int, n: int, shape, offset: int = 0) -> np.ndarray:
    """One independent stream per row: row ``k`` uses ``seed_split(seed, offset + k)``.

    Rows depend only on their own index, so any chunking of ``n`` yields the
    same numbers.
    """
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    out = np.empty((n, *shape))
    for k in range(n):
        out[k] = normals(seed_split(seed, offset + k), shape)
    return out


# Named top-level streams, so that independent consumers of one user seed
# never share numbers.
STREAM_DATA = 1
STREAM_TRUTH = 2
STREAM_BACKWARD = 3
STREAM_LOSS = 4
STREAM_PROBE = 5
STREAM_SIGMA = 6
