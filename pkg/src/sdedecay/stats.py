"""Deterministic reductions and small statistical helpers.

Sums go through a fixed pairwise tree over the sample index (blocks of 128 summed
left to right, block sums combined pairwise). The rounding therefore depends
only on the data order, never on how the data was produced.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy.stats import ks_2samp

__all__ = [
    "pairwise_sum",
    "tree_mean",
    "mean_stderr",
    "column_mean_stderr",
    "batch_means_stderr",
    "KS_C_01",
    "ks_threshold",
    "ks_2samp_stat",
]

_LEAF = 128
KS_C_01 = 1.628


@njit(cache=True)
def _pairwise_sum(a):
    n = a.shape[0]
    if n == 0:
        return 0.0
    nb = (n + _LEAF - 1) // _LEAF
    buf = np.empty(nb)
    for b in range(nb):
        s = 0.0
        for i in range(b * _LEAF, min(n, (b + 1) * _LEAF)):
            s += a[i]
        buf[b] = s
    m = nb
    while m > 1:
        half = m // 2
        for i in range(half):
            buf[i] = buf[2 * i] + buf[2 * i + 1]
        if m % 2 == 1:
            buf[half] = buf[m - 1]
            m = half + 1
        else:
            m = half
    return buf[0]


def pairwise_sum(values) -> float:
    a = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    return float(_pairwise_sum(a))


def tree_mean(values) -> float:
    a = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError("mean of an empty sample")
    return float(_pairwise_sum(a)) / a.size


def mean_stderr(values) -> tuple[float, float]:
    """Sample mean and its standard error ``sd / sqrt(n)`` (two-pass, tree-summed)."""
    a = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    n = a.size
    if n == 0:
        raise ValueError("mean of an empty sample")
    mean = float(_pairwise_sum(a)) / n
    if n == 1:
        return mean, math.nan
    dev = a - mean
    var = float(_pairwise_sum(dev * dev)) / (n - 1)
    return mean, math.sqrt(var / n)


def column_mean_stderr(values) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise :func:`mean_stderr` of an ``(n, k)`` array."""
    a = np.asarray(values, dtype=np.float64)
    a = a.reshape(a.shape[0], -1)
    cols = np.ascontiguousarray(a.T)
    out = np.array([mean_stderr(c) for c in cols]).reshape(-1, 2)
    return out[:, 0], out[:, 1]


def batch_means_stderr(values, n_batches: int = 50) -> tuple[float, float]:
    """Mean and batch-means standard error for an autocorrelated series.

    The series is cut into ``n_batches`` contiguous batches (a remainder at the
    end is dropped from the error estimate only).
    """
    a = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    n = a.size
    if n < 2 * n_batches:
        raise ValueError(f"need at least {2 * n_batches} samples for {n_batches} batches")
    mean = tree_mean(a)
    size = n // n_batches
    means = np.array([tree_mean(a[i * size:(i + 1) * size]) for i in range(n_batches)])
    _, se = mean_stderr(means)
    return mean, se


def ks_threshold(n: int, m: int | None = None, c: float = KS_C_01) -> float:
    """Asymptotic two-sample KS critical value ``c sqrt((n + m) / (n m))`` (1% level)."""
    m = n if m is None else m
    return c * math.sqrt((n + m) / (n * m))


def ks_2samp_stat(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_a - F_b|``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return float(ks_2samp(a, b, method="asymp").statistic)
