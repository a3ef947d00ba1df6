#!/usr/bin/env python3
"""Benchmark the numpy kernel backend against the compiled extension.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]

Shapes mirror the convolutions the default model actually executes, so the
numbers answer the only question that matters: which backend should a given
machine default to.
"""

import argparse
import time

import numpy as np

from protopyramid.kernels import reference

try:
    from protopyramid.kernels import _fast
except ImportError:
    _fast = None

SHAPES = [
    # (label, x shape, kernel shape, stride, padding)
    ("block0 conv 64px", (8, 16, 64, 64), (16, 16, 3, 3), 1, 1),
    ("block1 conv 32px", (8, 32, 32, 32), (32, 32, 3, 3), 1, 1),
    ("block2 conv 16px", (8, 64, 16, 16), (64, 64, 3, 3), 1, 1),
    ("lateral 1x1", (8, 64, 8, 8), (32, 64, 1, 1), 1, 0),
    ("smooth 3x3", (8, 32, 16, 16), (32, 32, 3, 3), 1, 1),
]


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(impl, dtype, repeats):
    rows = {}
    rng = np.random.default_rng(0)
    for label, xs, ks, stride, pad in SHAPES:
        x = rng.normal(size=xs).astype(dtype)
        k = rng.normal(size=ks).astype(dtype)
        out = impl.conv2d_forward(x, k, stride, pad)
        g = np.ones_like(out)
        rows[f"{label} fwd"] = timeit(lambda: impl.conv2d_forward(x, k, stride, pad), repeats)
        rows[f"{label} bwd-x"] = timeit(
            lambda: impl.conv2d_backward_input(g, k, x.shape, stride, pad), repeats)
        rows[f"{label} bwd-k"] = timeit(
            lambda: impl.conv2d_backward_kernel(g, x, k.shape, stride, pad), repeats)
    x = rng.normal(size=(8, 32, 64, 64)).astype(dtype)
    out, idx = impl.maxpool2d_forward(x, 2, 2)
    g = np.ones_like(out)
    rows["maxpool fwd"] = timeit(lambda: impl.maxpool2d_forward(x, 2, 2), repeats)
    rows["maxpool bwd"] = timeit(
        lambda: impl.maxpool2d_backward(g, idx, x.shape, 2, 2), repeats)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = ap.parse_args()
    dtype = np.dtype(args.dtype)

    print(f"dtype={args.dtype} repeats={args.repeats} (best-of timing, ms)")
    ref = bench_backend(reference, dtype, args.repeats)
    if _fast is None:
        print("compiled backend not built; showing numpy only")
        for label, t in ref.items():
            print(f"{label:28s} {t * 1e3:9.3f}")
        return
    cyt = bench_backend(_fast, dtype, args.repeats)
    print(f"{'kernel':28s} {'numpy':>9s} {'cython':>9s} {'ratio':>7s}")
    for label in ref:
        r, c = ref[label], cyt[label]
        print(f"{label:28s} {r * 1e3:9.3f} {c * 1e3:9.3f} {c / r:7.2f}")
    total_r = sum(ref.values())
    total_c = sum(cyt.values())
    print(f"{'TOTAL':28s} {total_r * 1e3:9.3f} {total_c * 1e3:9.3f} {total_c / total_r:7.2f}")
    print("ratio > 1 means the numpy backend is faster on this machine")


if __name__ == "__main__":
    main()
