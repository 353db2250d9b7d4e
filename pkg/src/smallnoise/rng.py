"""
Counter-based random numbers.

Every variate is a pure function of ``(seed, domain, level, step, stream, component)``
computed with the Philox4x32-10 bijection, so an ensemble produces the same numbers
whatever the order in which paths, chunks or threads are evaluated.

Counter layout (four 32-bit words)::

    c0 = step
    c1 = domain << 28 | level << 22 | component pair index
    c2 = low 32 bits of the stream id
    c3 = high 32 bits of the stream id

and the 64-bit seed is the key. Each Philox block yields two uniforms with 53 bits of
resolution; normals are obtained by inverting the standard normal CDF, which keeps
the mapping deterministic (no rejection loops).
"""

from __future__ import annotations

import numba
import numpy as np
from scipy.special import ndtri

PHILOX_M0 = 0xD2511F53
PHILOX_M1 = 0xCD9E8D57
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85
PHILOX_ROUNDS = 10

# stream domains; x0 sampling never shares counters with the Brownian driver
DOMAIN_BROWNIAN = 0
DOMAIN_INITIAL = 1
DOMAIN_AUX = 2

MAX_LEVEL = 63
MAX_PAIRS = 1 << 22

_MASK32 = np.uint64(0xFFFFFFFF)


@numba.njit(cache=True, nogil=True)
def _philox_block(c0, c1, c2, c3, k0, k1):
    mask = np.uint64(0xFFFFFFFF)
    m0 = np.uint64(PHILOX_M0)
    m1 = np.uint64(PHILOX_M1)
    w0 = np.uint64(PHILOX_W0)
    w1 = np.uint64(PHILOX_W1)
    s32 = np.uint64(32)
    for _ in range(PHILOX_ROUNDS):
        p0 = m0 * c0
        p1 = m1 * c2
        hi0 = p0 >> s32
        lo0 = p0 & mask
        hi1 = p1 >> s32
        lo1 = p1 & mask
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = (k0 + w0) & mask
        k1 = (k1 + w1) & mask
    return c0, c1, c2, c3


@numba.njit(cache=True, nogil=True)
def _philox_many(counters, k0, k1, out):
    for i in range(counters.shape[0]):
        r0, r1, r2, r3 = _philox_block(
            counters[i, 0], counters[i, 1], counters[i, 2], counters[i, 3], k0, k1
        )
        out[i, 0] = r0
        out[i, 1] = r1
        out[i, 2] = r2
        out[i, 3] = r3


@numba.njit(cache=True, nogil=True)
def _uniform_kernel(k0, k1, c0, c1_base, streams, n_comp, out):
    mask = np.uint64(0xFFFFFFFF)
    s32 = np.uint64(32)
    n_pairs = (n_comp + 1) // 2
    for i in range(streams.shape[0]):
        s = streams[i]
        c2 = s & mask
        c3 = s >> s32
        for p in range(n_pairs):
            r0, r1, r2, r3 = _philox_block(
                c0, c1_base | np.uint64(p), c2, c3, k0, k1
            )
            j = 2 * p
            a = (r0 >> np.uint64(5)) * np.uint64(67108864) + (r1 >> np.uint64(6))
            out[i, j] = (np.float64(a) + 0.5) * 1.1102230246251565e-16
            if j + 1 < n_comp:
                b = (r2 >> np.uint64(5)) * np.uint64(67108864) + (r3 >> np.uint64(6))
                out[i, j + 1] = (np.float64(b) + 0.5) * 1.1102230246251565e-16


def philox4x32(counters, key) -> np.ndarray:
    """
    Apply Philox4x32-10 to a batch of counters.

    Parameters
    ----------
    counters : array_like, shape (n, 4)
        32-bit counter words.
    key : int or pair of int
        Either a 64-bit integer (low word first) or two 32-bit key words.

    Returns
    -------
    ndarray of uint64, shape (n, 4)
        Output words, each in ``[0, 2**32)``.
    """
    ctr = np.ascontiguousarray(np.atleast_2d(counters), dtype=np.uint64)
    if ctr.shape[-1] != 4:
        raise ValueError("counters must have 4 words")
    if np.any(ctr > _MASK32):
        raise ValueError("counter words must fit in 32 bits")
    k0, k1 = _split_key(key)
    out = np.empty_like(ctr)
    _philox_many(ctr, k0, k1, out)
    return out


def _split_key(key) -> tuple[np.uint64, np.uint64]:
    if isinstance(key, (tuple, list)):
        k0, k1 = (int(k) for k in key)
    else:
        seed = int(key)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {key}")
        k0, k1 = seed & 0xFFFFFFFF, seed >> 32
    return np.uint64(k0), np.uint64(k1)


def _as_streams(stream_ids) -> np.ndarray:
    s = np.atleast_1d(np.asarray(stream_ids))
    if s.ndim != 1:
        raise ValueError("stream ids must be one-dimensional")
    if s.size and (s.dtype.kind == "i" and s.min() < 0):
        raise ValueError("stream ids must be non-negative")
    return np.ascontiguousarray(s, dtype=np.uint64)


def uniforms(seed: int, stream_ids, step: int, n_comp: int,
             *, domain: int = DOMAIN_BROWNIAN, level: int = 0) -> np.ndarray:
    """
    Uniform variates in the open interval (0, 1).

    Returns an array of shape ``(len(stream_ids), n_comp)``; row ``i`` depends only on
    ``(seed, domain, level, step, stream_ids[i])``.
    """
    if not 0 <= step < 2**32:
        raise ValueError(f"step index {step} outside the 32-bit counter range")
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"refinement level {level} outside [0, {MAX_LEVEL}]")
    if not 0 <= domain < 16:
        raise ValueError("domain must be in [0, 16)")
    if n_comp < 1 or (n_comp + 1) // 2 > MAX_PAIRS:
        raise ValueError("invalid component count")
    k0, k1 = _split_key(seed)
    streams = _as_streams(stream_ids)
    out = np.empty((streams.shape[0], n_comp), dtype=np.float64)
    c1 = np.uint64((domain << 28) | (level << 22))
    _uniform_kernel(k0, k1, np.uint64(step), c1, streams, n_comp, out)
    return out


def normals(seed: int, stream_ids, step: int, n_comp: int,
            *, domain: int = DOMAIN_BROWNIAN, level: int = 0) -> np.ndarray:
    """Standard normal variates by inverse-CDF transform of :func:`uniforms`."""
    return ndtri(uniforms(seed, stream_ids, step, n_comp, domain=domain, level=level))
