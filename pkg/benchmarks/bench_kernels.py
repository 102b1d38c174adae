"""Numba vs pure-numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--iters N]

Each kernel runs on the same inputs in both flavours; the script also
reports the largest absolute disagreement between them. The library picks
the numba path unless MMDRESTORE_DISABLE_JIT=1 is set.
"""

import argparse
import time

import numpy as np

from mmdrestore import _kernels as K
from mmdrestore._jit import HAVE_NUMBA, USE_NUMBA


def bench(fn, args, iters, warmup=2):
    for _ in range(warmup):
        out = fn(*args)
    start = time.perf_counter()
    for _ in range(iters):
        out = fn(*args)
    return (time.perf_counter() - start) / iters * 1e3, out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def cases(rng):
    n, m = 32 * 256, 10  # one batch of 32 16x16 gray images, 10 components
    levels = rng.integers(0, 256, n)
    logits = rng.normal(size=(n, m))
    means = rng.uniform(-1, 1, (n, m))
    raw = rng.uniform(-6, 0, (n, m))
    x, y = rng.normal(size=(8, 32)), rng.normal(size=(1000, 32))
    log_pmf = K.mixture_log_pmf_numpy(logits[:256], means[:256], raw[:256])
    return {
        "mixture_nll_grad": (levels, logits, means, raw, K.GAUSSIAN),
        "mixture_log_pmf": (logits[:256], means[:256], raw[:256], K.GAUSSIAN),
        "sample_levels": (log_pmf, rng.random(256)),
        "pairwise_distances": (y, y),
        "kernel_grad_sum": (x, y, 8.0, False),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return 1
    print(f"library default path: {'numba' if USE_NUMBA else 'numpy'}")
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, inputs in cases(np.random.default_rng(args.seed)).items():
        t_np, out_np = bench(getattr(K, f"{name}_numpy"), inputs, args.iters)
        t_nb, out_nb = bench(getattr(K, f"{name}_numba"), inputs, args.iters)
        print(f"{name:<20} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x {max_diff(out_np, out_nb):>10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
