"""Packed GEMM throughput: numba kernel vs the numpy fallback.

    python benchmarks/bench_gemm.py [--repeats 5]

Also compares against a float64 matmul of the unpacked +1/-1 matrices.
Set BIVIT_DISABLE_NUMBA=1 to check that the fallback runs on its own.
"""

import argparse
import time

import numpy as np

from bivit import bitops

SHAPES = [(64, 64, 64), (1088, 64, 192), (8320, 256, 64), (512, 512, 1024)]


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = bitops.available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'m x n x k':>18} " + " ".join(f"{b:>12}" for b in backends) + f" {'dense f64':>12}")
    for m, n, k in SHAPES:
        a = rng.choice((-1.0, 1.0), (m, k))
        b = rng.choice((-1.0, 1.0), (n, k))
        pa, pb = bitops.pack_signs(a), bitops.pack_signs(b)
        ref = (a @ b.T).astype(np.int64)
        times = []
        for name in backends:
            bitops.set_backend(name)
            out = bitops.xnor_popcount_gemm(pa, pb)  # warm-up (and JIT compile)
            assert np.array_equal(out, ref), name
            times.append(best_of(lambda: bitops.xnor_popcount_gemm(pa, pb), args.repeats))
        dense = best_of(lambda: a @ b.T, args.repeats)
        cells = " ".join(f"{1e3 * t:10.2f}ms" for t in times)
        print(f"{f'{m}x{n}x{k}':>18} {cells} {1e3 * dense:10.2f}ms")
    bitops.set_backend(backends[0])


if __name__ == "__main__":
    main()
