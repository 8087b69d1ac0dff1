"""Compare the numba kernels with their numpy fallbacks.

Run with ``python3 benchmarks/bench_kernels.py``.  Each row reports the
best-of-N wall time for both paths and the max absolute disagreement.
"""

import argparse
import time

import numpy as np

from mcse import kernels
from mcse._jit import HAVE_NUMBA


def best_time(fn, repeats):
    fn()
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def scan_case(S, L, D, N, rng):
    u = rng.standard_normal((S, L, D))
    delta = rng.uniform(1e-3, 0.1, (S, L, D))
    A = -rng.uniform(0.5, 2.0, (D, N))
    B = rng.standard_normal((S, L, N))
    C = rng.standard_normal((S, L, N))
    return u, delta, A, B, C


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'shape':<22}{'numba s':>10}{'numpy s':>10}{'speedup':>9}{'max |diff|':>12}")
    for S, L, D, N in [(8, 100, 32, 8), (101, 50, 32, 8), (4, 1000, 64, 16)]:
        u, delta, A, B, C = scan_case(S, L, D, N, rng)
        y_nb, _ = kernels.selective_scan_forward(u, delta, A, B, C, use_numba=True)
        y_np, cache = kernels.selective_scan_forward(u, delta, A, B, C, use_numba=False)
        t_nb = best_time(lambda: kernels.selective_scan_forward(u, delta, A, B, C, use_numba=True), args.repeats)
        t_np = best_time(lambda: kernels.selective_scan_forward(u, delta, A, B, C, use_numba=False), args.repeats)
        shape = f"{S}x{L}x{D}x{N}"
        print(f"{'selective_scan fwd':<28}{shape:<22}{t_nb:>10.4f}{t_np:>10.4f}{t_np / t_nb:>9.1f}"
              f"{np.abs(y_nb - y_np).max():>12.2e}")
        gy = rng.standard_normal(y_nb.shape)
        g_nb = kernels.selective_scan_backward(u, delta, A, B, C, gy, use_numba=True)
        g_np = kernels.selective_scan_backward(u, delta, A, B, C, gy, cache, use_numba=False)
        t_nb = best_time(lambda: kernels.selective_scan_backward(u, delta, A, B, C, gy, use_numba=True),
                         args.repeats)
        t_np = best_time(lambda: kernels.selective_scan_backward(u, delta, A, B, C, gy, cache, use_numba=False),
                         args.repeats)
        diff = max(np.abs(a - b).max() for a, b in zip(g_nb, g_np))
        print(f"{'selective_scan bwd':<28}{shape:<22}{t_nb:>10.4f}{t_np:>10.4f}{t_np / t_nb:>9.1f}{diff:>12.2e}")
    for P, L, Q in [(4, 1000, 64), (64, 4096, 16)]:
        a = rng.uniform(0.5, 1.0, (P, L, Q))
        b = rng.standard_normal((P, L, Q))
        h_nb = kernels.linear_scan(a, b, use_numba=True)
        h_np = kernels.linear_scan(a, b, use_numba=False)
        t_nb = best_time(lambda: kernels.linear_scan(a, b, use_numba=True), args.repeats)
        t_np = best_time(lambda: kernels.linear_scan(a, b, use_numba=False), args.repeats)
        print(f"{'linear_scan':<28}{f'{P}x{L}x{Q}':<22}{t_nb:>10.4f}{t_np:>10.4f}{t_np / t_nb:>9.1f}"
              f"{np.abs(h_nb - h_np).max():>12.2e}")


if __name__ == "__main__":
    main()
