"""Counter-based Gaussian increments.

Every standard normal is a pure function of ``(seed, path_id, index, stream)``
so any increment can be regenerated without replaying a sequential state.
The block cipher is Philox4x32-10; uniforms are mapped to normals through the
inverse normal CDF.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)


def philox4x32(counter, key, rounds=10):
    """Philox4x32 block function, vectorised over leading axes.

    Parameters
    ----------
    counter : tuple of 4 uint32-valued arrays (broadcastable)
    key : tuple of 2 uint32-valued arrays (broadcastable)

    Returns
    -------
    tuple of 4 ``uint64`` arrays holding 32-bit words.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    k0, k1 = (np.asarray(k, dtype=np.uint64) & _MASK for k in key)
    for i in range(rounds):
        if i > 0:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT, p0 & _MASK
        hi1, lo1 = p1 >> _SHIFT, p1 & _MASK
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


def _key(seed):
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be in [0, 2**64)")
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def uniforms(seed, path_ids, n, stream=0):
    """Open-interval uniforms of shape ``(len(path_ids), n)``.

    Each Philox block yields two 53-bit uniforms; index ``i`` of a path uses
    block ``i // 2``, half ``i % 2``.
    """
    path_ids = np.atleast_1d(np.asarray(path_ids, dtype=np.uint64))
    nblocks = (n + 1) // 2
    blk = np.arange(nblocks, dtype=np.uint64)[None, :]
    pid = path_ids[:, None]
    k0, k1 = _key(seed)
    w0, w1, w2, w3 = philox4x32(
        (blk, pid & _MASK, pid >> _SHIFT, np.uint64(stream)), (k0, k1)
    )
    scale = 1.0 / 9007199254740992.0  # 2**-53
    a = ((w0 >> np.uint64(5)) << np.uint64(26)) + (w1 >> np.uint64(6))
    b = ((w2 >> np.uint64(5)) << np.uint64(26)) + (w3 >> np.uint64(6))
    u = np.empty((path_ids.size, 2 * nblocks))
    u[:, 0::2] = (a.astype(np.float64) + 0.5) * scale
    u[:, 1::2] = (b.astype(np.float64) + 0.5) * scale
    return u[:, :n]


def normals(seed, path_ids, n, stream=0):
    """Standard normals addressed by ``(seed, path_id, index, stream)``."""
    return ndtri(uniforms(seed, path_ids, n, stream))
