"""Throughput and agreement of the sequential and blocked linear scans."""

from __future__ import annotations

import time
from typing import Sequence

import numpy as np

from . import kernels


def scan_inputs(length: int, width: int = 64, batch: int = 4, seed: int = 0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 1.0, size=(batch, length, width))
    b = rng.standard_normal((batch, length, width))
    h0 = rng.standard_normal((batch, width))
    return a, b, h0


def max_rel_dev(ref: np.ndarray, other: np.ndarray) -> float:
    return float(np.abs(ref - other).max() / max(np.abs(ref).max(), 1e-300))


def _time(fn, repeats: int) -> float:
    fn()
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_scanbench(lengths: Sequence[int] = (64, 1000, 4096), chunk: int = 16, width: int = 64,
                  batch: int = 4, seed: int = 0, repeats: int = 3) -> list[dict]:
    rows = []
    for length in lengths:
        a, b, h0 = scan_inputs(length, width, batch, seed)
        seq = kernels.linear_scan(a, b, h0)
        chk = kernels.linear_scan_chunked(a, b, h0, chunk=chunk)
        steps = batch * length * width
        rows.append({
            "L": int(length),
            "sequential_steps_per_s": steps / _time(lambda: kernels.linear_scan(a, b, h0), repeats),
            "chunked_steps_per_s": steps / _time(lambda: kernels.linear_scan_chunked(a, b, h0, chunk=chunk), repeats),
            "max_rel_dev": max_rel_dev(seq, chk),
        })
    return rows
