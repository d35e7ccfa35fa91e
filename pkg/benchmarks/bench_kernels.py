"""Numba vs pure-numpy timings for the hot kernels.

Run:  python benchmarks/bench_kernels.py [--repeat 200]

Also checks that both paths agree before timing anything.  Prints one line
per kernel with the mean time per call on each backend and the speedup.
"""

import argparse
import time

import numpy as np

from groupdpo._kernels import numba_kernels, numpy_kernels


def _time(fn, repeat):
    fn()  # first call triggers compilation on the numba path
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def cases(rng):
    x = rng.normal(size=(32, 64, 32))
    g = rng.normal(size=(32, 64, 32))
    idx = rng.integers(0, 32, size=32 * 64)
    rows = rng.normal(size=(idx.size, 32))
    up, un = rng.normal(size=16), rng.normal(size=16)
    return {
        "causal_mean (32x64x32)": lambda k: k.causal_mean(x),
        "causal_mean_backward": lambda k: k.causal_mean_backward(g),
        "scatter_add_rows (2048 rows)": lambda k: k.scatter_add_rows(np.zeros((32, 32)), idx, rows),
        "allpairs_loss_grad (16x16)": lambda k: k.allpairs_loss_grad(up, un),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if numba_kernels is None:
        print("numba path unavailable (not installed or GROUPDPO_DISABLE_NUMBA set)")
        return
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<30}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call in cases(rng).items():
        a, b = call(numpy_kernels), call(numba_kernels)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
        tn = _time(lambda: call(numpy_kernels), args.repeat)
        tj = _time(lambda: call(numba_kernels), args.repeat)
        print(f"{name:<30}{1e3 * tn:>10.4f}{1e3 * tj:>10.4f}{tn / tj:>8.1f}x")


if __name__ == "__main__":
    main()
