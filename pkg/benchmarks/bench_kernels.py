"""Benchmark the compiled neighbor-search kernel against the NumPy fallback.

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from slap.kernels import _fallback

try:
    from slap.kernels import _native
except ImportError:
    _native = None

CASES = [
    # (n_points, n_centers, radius) roughly matching tokenizer workloads
    (3_000, 2_500, 0.02),
    (8_000, 8_000, 0.02),
    (20_000, 8_000, 0.05),
    (50_000, 5_000, 0.05),
]
CAP = 64


def run(impl, pts, ctr, radius, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        impl.ball_query(pts, ctr, radius, CAP)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    print(f"{'points':>8} {'centers':>8} {'radius':>7} {'numpy (ms)':>11} "
          f"{'native (ms)':>12} {'speedup':>8}")
    for n, m, radius in CASES:
        pts = rng.uniform(-0.4, 0.4, (n, 3))
        ctr = pts[rng.integers(0, n, m)]
        t_f = run(_fallback, pts, ctr, radius)
        if _native is None:
            print(f"{n:8d} {m:8d} {radius:7.3f} {t_f*1e3:11.1f} {'n/a':>12} {'n/a':>8}")
            continue
        t_n = run(_native, pts, ctr, radius)
        c_f, f_f = _fallback.ball_query(pts, ctr, radius, CAP)
        c_n, f_n = _native.ball_query(pts, ctr, radius, CAP)
        assert np.array_equal(c_f, c_n) and np.array_equal(f_f, f_n), "implementations disagree"
        print(f"{n:8d} {m:8d} {radius:7.3f} {t_f*1e3:11.1f} {t_n*1e3:12.1f} "
              f"{t_f/t_n:7.1f}x")
    if _native is None:
        print("\ncompiled kernel not built; install with `pip install -e .` "
              "or run `python setup.py build_ext --inplace`")


if __name__ == "__main__":
    main()
