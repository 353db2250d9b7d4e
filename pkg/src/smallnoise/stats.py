"""Block jackknife standard errors for Monte Carlo means."""

from __future__ import annotations

import numpy as np

from .errors import InsufficientDataError

DEFAULT_BLOCKS = 32


def block_jackknife(values, n_blocks: int = DEFAULT_BLOCKS) -> tuple[np.ndarray, np.ndarray]:
    """
    Mean and jackknife standard error along axis 0.

    Rows are grouped into ``n_blocks`` contiguous blocks (fewer rows than blocks
    falls back to delete-one). Each block is left out in turn; the spread of the
    leave-one-out means gives the standard error.

    Parameters
    ----------
    values : array_like, shape (M, ...)
        Per-path samples in stream order.
    n_blocks : int
        Number of blocks.

    Returns
    -------
    mean, se : ndarray
        Arrays of shape ``values.shape[1:]`` (scalars for 1-D input).
    """
    v = np.asarray(values, dtype=float)
    M = v.shape[0]
    if M == 0:
        raise InsufficientDataError("no samples")
    total = v.sum(axis=0)
    mean = total / M
    if M < 2:
        return mean, np.zeros_like(mean)
    B = min(int(n_blocks), M)
    edges = np.linspace(0, M, B + 1).round().astype(np.int64)
    sums = np.add.reduceat(v, edges[:-1], axis=0)
    counts = np.diff(edges).reshape((B,) + (1,) * (v.ndim - 1))
    loo = (total - sums) / (M - counts)
    dev = loo - loo.mean(axis=0)
    se = np.sqrt((B - 1) / B * np.sum(dev * dev, axis=0))
    return mean, se


def jackknife_mean(values, n_blocks: int = DEFAULT_BLOCKS) -> tuple[float, float]:
    """Scalar version of :func:`block_jackknife` for 1-D samples."""
    m, s = block_jackknife(np.asarray(values, dtype=float).ravel(), n_blocks)
    return float(m), float(s)
