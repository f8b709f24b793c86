"""Pure-NumPy radius neighbor search (fallback for the compiled kernel).

Chunked brute force: O(n_points * n_centers) distances. Correct and
dependency-free, but 1-2 orders of magnitude slower than the compiled
hash-grid version on training-sized clouds; see benchmarks/bench_kernels.py.
"""

import numpy as np

IMPLEMENTATION = "python"

_CHUNK = 256


def ball_query(points, centers, radius, cap):
    """Indices of all points within ``radius`` of each center.

    Per center, indices are ascending and truncated to the first ``cap``.
    Returns ``(counts, flat)`` where ``counts[i]`` entries of ``flat``
    (concatenated in center order) belong to center ``i``.

    Distances use the squared 2-norm accumulated axis by axis; the compiled
    kernel evaluates the identical expression so both paths agree bitwise
    at the boundary ``d^2 == radius^2``.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    _validate(points, centers, radius, cap)
    n_centers = centers.shape[0]
    counts = np.zeros(n_centers, dtype=np.int64)
    if points.shape[0] == 0 or n_centers == 0:
        return counts, np.zeros(0, dtype=np.int64)

    r2 = float(radius) * float(radius)
    pieces = []
    for lo in range(0, n_centers, _CHUNK):
        c = centers[lo:lo + _CHUNK]
        dx = points[None, :, 0] - c[:, 0, None]
        dy = points[None, :, 1] - c[:, 1, None]
        dz = points[None, :, 2] - c[:, 2, None]
        hits = dx * dx + dy * dy + dz * dz <= r2
        rows, cols = np.nonzero(hits)
        row_counts = np.bincount(rows, minlength=c.shape[0])
        starts = np.concatenate(([0], np.cumsum(row_counts)))
        rank = np.arange(rows.shape[0]) - starts[rows]
        keep = rank < cap
        counts[lo:lo + c.shape[0]] = np.minimum(row_counts, cap)
        pieces.append(cols[keep].astype(np.int64, copy=False))
    flat = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
    return counts, flat


def _validate(points, centers, radius, cap):
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {points.shape}")
    if centers.ndim != 2 or centers.shape[1] != 3:
        raise ValueError(f"centers must be (M, 3), got {centers.shape}")
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    for name, arr in (("points", points), ("centers", centers)):
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contain non-finite coordinates")
        if arr.size and np.abs(arr).max() > 1e6:
            raise ValueError(f"{name} coordinates exceed the supported range (|x| <= 1e6 m)")
