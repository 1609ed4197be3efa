"""Counter-based Gaussian draws (Philox4x32-10 + Box-Muller).

Every normal variate is a pure function of ``(seed, tag, step, particle, path,
component)``, so simulations are reproducible independently of batch layout,
worker count, or the order in which cells are evaluated. Particle ``i`` of path
``p`` sees the same noise for every population size ``N > i``, which gives
common random numbers across an ``N`` sweep for free.
"""

from __future__ import annotations

import numba as nb
import numpy as np

# stream tags, packed into the high half of the fourth counter word
TAG_INIT = 0
TAG_IDIO = 1
TAG_COMMON = 2
TAG_AUX = 3

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)


@nb.njit(cache=True, inline="always")
def _philox(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> np.uint64(32)
        lo0 = p0 & _MASK
        hi1 = p1 >> np.uint64(32)
        lo1 = p1 & _MASK
        c0 = (hi1 ^ c1 ^ k0) & _MASK
        c1 = lo1
        c2 = (hi0 ^ c3 ^ k1) & _MASK
        c3 = lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@nb.njit(cache=True)
def philox4x32(counter, key):
    """Raw Philox4x32-10 block. ``counter``: 4 words, ``key``: 2 words."""
    out = np.empty(4, dtype=np.uint64)
    r = _philox(
        np.uint64(counter[0]), np.uint64(counter[1]), np.uint64(counter[2]),
        np.uint64(counter[3]), np.uint64(key[0]), np.uint64(key[1]),
    )
    out[0], out[1], out[2], out[3] = r
    return out


@nb.njit(cache=True)
def _fill(out, k0, k1, tag, step0, path0, part0):
    n_steps, n_paths, n_parts, dim = out.shape
    two53 = 9007199254740992.0
    for s in range(n_steps):
        c0 = np.uint64(step0 + s)
        for p in range(n_paths):
            c2 = np.uint64(path0 + p)
            for i in range(n_parts):
                c1 = np.uint64(part0 + i)
                for b in range((dim + 1) // 2):
                    c3 = (np.uint64(tag) << np.uint64(16)) | np.uint64(b)
                    w0, w1, w2, w3 = _philox(c0, c1, c2, c3, k0, k1)
                    u1 = ((w0 >> np.uint64(5)) * 67108864.0 + (w1 >> np.uint64(6)) + 0.5) / two53
                    u2 = ((w2 >> np.uint64(5)) * 67108864.0 + (w3 >> np.uint64(6)) + 0.5) / two53
                    rad = np.sqrt(-2.0 * np.log(u1))
                    ang = 2.0 * np.pi * u2
                    out[s, p, i, 2 * b] = rad * np.cos(ang)
                    if 2 * b + 1 < dim:
                        out[s, p, i, 2 * b + 1] = rad * np.sin(ang)


def _key(seed: int) -> tuple[np.uint64, np.uint64]:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def counter_normals(
    seed: int,
    tag: int,
    n_steps: int,
    n_paths: int,
    n_particles: int,
    dim: int,
    *,
    step0: int = 0,
    path0: int = 0,
    particle0: int = 0,
) -> np.ndarray:
    """Standard normals of shape ``(n_steps, n_paths, n_particles, dim)``.

    Entry ``[s, p, i, j]`` depends only on ``(seed, tag, step0 + s, path0 + p,
    particle0 + i, j)``.
    """
    if not 0 <= tag < 2**16:
        raise ValueError("tag must fit in 16 bits")
    k0, k1 = _key(seed)
    out = np.empty((n_steps, n_paths, n_particles, dim), dtype=np.float64)
    if out.size:
        _fill(out, k0, k1, tag, step0, path0, particle0)
    return out
