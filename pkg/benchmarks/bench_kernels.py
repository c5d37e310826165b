"""Compiled vs numpy kernels on the shapes the planner actually produces.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Decoding one window runs Viterbi over a (T, N) marginal table built from K
sampled plans, so the interesting sizes are K=1500, T in 3..6, N in 12..200.
"""
import argparse
import timeit

import numpy as np

from capplan import _kernels_py

try:
    from capplan import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng):
    for N, T in [(12, 3), (12, 6), (105, 4), (200, 6)]:
        A = rng.random((N, N)) + 1e-3
        A /= A.sum(1, keepdims=True)
        B = rng.random((T, N))
        yield f"viterbi N={N:<3} T={T}", "viterbi_path", (np.log(A), np.log(B), 1e-9), 200
    for K, T, N in [(1500, 3, 12), (1500, 6, 105)]:
        plans = rng.integers(N, size=(K, T))
        yield f"marginals K={K} T={T} N={N}", "count_marginals", (plans, N), 200
    lengths = rng.integers(3, 8, size=2000)
    flat = rng.integers(105, size=lengths.sum())
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    yield "transitions 2000 seqs N=105", "count_transitions", (flat, offsets, 105), 5


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'case':<32} {'python (us)':>12} {'cython (us)':>12} {'speedup':>8}")
    for label, fn, fargs, number in cases(rng):
        py = min(timeit.repeat(lambda: getattr(_kernels_py, fn)(*fargs), number=number, repeat=args.repeat))
        py_us = 1e6 * py / number
        if compiled is None:
            print(f"{label:<32} {py_us:>12.1f} {'n/a':>12} {'':>8}")
            continue
        cy = min(timeit.repeat(lambda: getattr(compiled, fn)(*fargs), number=number, repeat=args.repeat))
        cy_us = 1e6 * cy / number
        assert np.array_equal(getattr(compiled, fn)(*fargs), getattr(_kernels_py, fn)(*fargs))
        print(f"{label:<32} {py_us:>12.1f} {cy_us:>12.1f} {py_us / cy_us:>7.1f}x")


if __name__ == "__main__":
    main()
