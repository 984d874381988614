"""Kernel benchmark: packed XNOR/popcount GEMM against float baselines.

Correctness is verified before any timing: the packed kernel must equal
the float GEMM of the sign-binarized operands exactly, or the benchmark
aborts.  Timings compare against a naive (non-BLAS) float GEMM and the
BLAS float reference; speedups are machine-dependent and reported, not
asserted.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import bittensor

DEFAULT_SIZES = (256, 512, 1024, 2048)


@dataclass
class BenchRow:
    size: int
    packed_s: float
    naive_s: float
    blas_s: float
    gflops_equiv: float  # 2*n^3 / packed time
    speedup_vs_naive: float
    speedup_vs_blas: float


def _naive_gemm(a, b):
    # einsum without optimization: plain C loops, no BLAS dispatch
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def _time(fn, min_repeat=1):
    best = float("inf")
    for _ in range(min_repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(sizes=DEFAULT_SIZES, seed=0, repeats=3):
    """Returns a list of BenchRow; raises if the equality check fails."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        a = rng.standard_normal((n, n)).astype(np.float32)
        b = rng.standard_normal((n, n)).astype(np.float32)
        a_sign = np.where(a >= 0, 1.0, -1.0).astype(np.float32)
        b_sign = np.where(b >= 0, 1.0, -1.0).astype(np.float32)
        ap = bittensor.pack(a)
        bp = bittensor.pack(b.T)  # transposed layout: rows are contiguous

        packed = bittensor.binary_gemm(ap, bp)
        reference = a_sign @ b_sign
        if not np.array_equal(packed, reference):
            raise AssertionError(
                f"kernel/reference mismatch at size {n}; refusing to time "
                f"an incorrect kernel"
            )

        packed_s = _time(lambda: bittensor.binary_gemm(ap, bp), repeats)
        blas_s = _time(lambda: a_sign @ b_sign, repeats)
        naive_s = _time(lambda: _naive_gemm(a_sign, b_sign), 1)
        flops = 2.0 * n * n * n
        rows.append(BenchRow(
            size=n,
            packed_s=packed_s,
            naive_s=naive_s,
            blas_s=blas_s,
            gflops_equiv=flops / packed_s / 1e9,
            speedup_vs_naive=naive_s / packed_s,
            speedup_vs_blas=blas_s / packed_s,
        ))
    return rows


def format_table(rows) -> str:
    lines = [
        f"{'size':>6} {'packed (s)':>12} {'naive (s)':>12} {'blas (s)':>12} "
        f"{'GFLOP-eq':>10} {'vs naive':>9} {'vs blas':>9}",
    ]
    for r in rows:
        lines.append(
            f"{r.size:>6} {r.packed_s:>12.4f} {r.naive_s:>12.4f} "
            f"{r.blas_s:>12.4f} {r.gflops_equiv:>10.1f} "
            f"{r.speedup_vs_naive:>8.1f}x {r.speedup_vs_blas:>8.2f}x"
        )
    return "\n".join(lines)
