"""Empirical MMD^2 between a query set and a prior bank.

The kernel is ``exp(-||x - y|| / gamma)`` with the Euclidean norm left
unsquared; ``squared_exponent=True`` switches to ``exp(-||x - y||^2 / gamma)``.
The estimator is the biased V-statistic, self pairs included.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import make_rng

DEFAULT_GAMMA = 512.0


@dataclass(frozen=True)
class MmdConfig:
    bandwidth_gamma: float = DEFAULT_GAMMA
    squared_exponent: bool = False

    def __post_init__(self):
        if not self.bandwidth_gamma > 0:
            raise ValueError(f"bandwidth_gamma must be > 0, got {self.bandwidth_gamma}")


def as_sample_set(x):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"sample set must be [n >= 1, d >= 1], got shape {np.shape(x)}")
    return a


def _check_dims(xs, ys):
    if xs.shape[1] != ys.shape[1]:
        raise ValueError(f"dimension mismatch: {xs.shape[1]} vs {ys.shape[1]}")


def _cfg(cfg):
    if cfg is None:
        return MmdConfig()
    if isinstance(cfg, MmdConfig):
        return cfg
    return MmdConfig(float(cfg))


def kernel_gram(xs, ys, gamma, squared_exponent=False):
    xs, ys = as_sample_set(xs), as_sample_set(ys)
    _check_dims(xs, ys)
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    dist = _kernels.pairwise_distances(xs, ys)
    if squared_exponent:
        return np.exp(-(dist**2) / gamma)
    return np.exp(-dist / gamma)


def _mean_kernel(xs, ys, cfg):
    return float(np.mean(kernel_gram(xs, ys, cfg.bandwidth_gamma, cfg.squared_exponent)))


def bank_term(bank, cfg=None):
    """The bank-vs-bank mean kernel; constant during optimization, so cacheable."""
    cfg = _cfg(cfg)
    bank = as_sample_set(bank)
    return _mean_kernel(bank, bank, cfg)


def mmd2(query, bank, cfg=None, bank_self=None):
    """Biased MMD^2. Pass a precomputed ``bank_self`` to skip the k'^2 term."""
    cfg = _cfg(cfg)
    query, bank = as_sample_set(query), as_sample_set(bank)
    _check_dims(query, bank)
    if bank_self is None:
        bank_self = _mean_kernel(bank, bank, cfg)
    return _mean_kernel(query, query, cfg) + bank_self - 2.0 * _mean_kernel(query, bank, cfg)


def mmd2_grad(query, bank, cfg=None):
    """d mmd2 / d query, shape [k, d]. Coincident pairs contribute zero."""
    cfg = _cfg(cfg)
    query, bank = as_sample_set(query), as_sample_set(bank)
    _check_dims(query, bank)
    k, kb = query.shape[0], bank.shape[0]
    g_self = _kernels.kernel_grad_sum(query, query, cfg.bandwidth_gamma, cfg.squared_exponent)
    g_cross = _kernels.kernel_grad_sum(query, bank, cfg.bandwidth_gamma, cfg.squared_exponent)
    # query appears in both slots of the self term, hence the factor 2
    return 2.0 * g_self / k**2 - 2.0 * g_cross / (k * kb)


def bandwidth_from_bank(bank, max_pairs=1000, seed=0):
    """Median pairwise distance over the bank (at most ``max_pairs`` pairs)."""
    bank = as_sample_set(bank)
    n = bank.shape[0]
    if n < 2:
        raise ValueError("bandwidth_from_bank needs at least 2 samples")
    total = n * (n - 1) // 2
    if total > max_pairs:
        ii, jj = _unrank_pairs(np.sort(make_rng(seed).choice(total, size=max_pairs, replace=False)), n)
    else:
        ii, jj = np.triu_indices(n, k=1)
    diff = bank[ii] - bank[jj]
    gamma = float(np.median(np.sqrt(np.einsum("ij,ij->i", diff, diff))))
    if not gamma > 0:
        raise ValueError("degenerate bank: median pairwise distance is zero")
    return gamma


def _unrank_pairs(t, n):
    """Row-major index into the strict upper triangle -> (i, j)."""
    t = np.asarray(t, dtype=np.int64)
    # rows before i hold i*n - i*(i+1)/2 pairs
    i = np.floor((2 * n - 1 - np.sqrt((2.0 * n - 1) ** 2 - 8.0 * t)) / 2).astype(np.int64)
    start = i * n - i * (i + 1) // 2
    low = t < start
    i[low] -= 1
    start = i * n - i * (i + 1) // 2
    high = t >= start + (n - 1 - i)
    i[high] += 1
    start = i * n - i * (i + 1) // 2
    return i, t - start + i + 1
