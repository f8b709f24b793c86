# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled radius neighbor search over a uniform hash grid.

Cells are sized to the query radius, so each query touches at most 27
cells. Results are identical (bitwise) to slap.kernels._fallback: per
center, ascending point indices with distance-squared <= radius-squared,
truncated to the first ``cap``.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor
from libc.stdlib cimport free, malloc, qsort

cnp.import_array()

IMPLEMENTATION = "native"


cdef int _cmp_i64(const void* a, const void* b) noexcept nogil:
    cdef long long va = (<const long long*> a)[0]
    cdef long long vb = (<const long long*> b)[0]
    if va < vb:
        return -1
    if va > vb:
        return 1
    return 0


def ball_query(points, centers, double radius, long cap):
    """See slap.kernels._fallback.ball_query for the contract."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    from slap.kernels._fallback import _validate
    _validate(points, centers, radius, cap)

    cdef long n = points.shape[0]
    cdef long m = centers.shape[0]
    counts_arr = np.zeros(m, dtype=np.int64)
    if n == 0 or m == 0:
        return counts_arr, np.zeros(0, dtype=np.int64)

    # Grid build (vectorized): cell coordinates, packed keys, sorted groups.
    cell = float(radius)
    pk = np.floor(points / cell).astype(np.int64)
    lo = pk.min(axis=0)
    span = pk.max(axis=0) - lo + 3  # +1 slack on each side for query cells
    if int(span[0]) * int(span[1]) * int(span[2]) >= 2 ** 62:
        raise ValueError("point extent too large for the grid key packing")
    rel = pk - lo + 1
    packed = (rel[:, 0] * span[1] + rel[:, 1]) * span[2] + rel[:, 2]
    order_arr = np.argsort(packed, kind="stable").astype(np.int64)
    sorted_keys = packed[order_arr]
    uniq_keys, starts_arr = np.unique(sorted_keys, return_index=True)
    starts_arr = np.concatenate((starts_arr, [n])).astype(np.int64)

    # For every center, group index of each of its 27 candidate cells (-1 if empty).
    ck = np.floor(centers / cell).astype(np.int64) - lo + 1
    offs = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)],
                    dtype=np.int64)
    cells = ck[:, None, :] + offs[None, :, :]
    in_range = np.all((cells >= 0) & (cells < span[None, None, :]), axis=2)
    qpacked = (cells[:, :, 0] * span[1] + cells[:, :, 1]) * span[2] + cells[:, :, 2]
    pos = np.searchsorted(uniq_keys, qpacked)
    pos_c = np.minimum(pos, uniq_keys.shape[0] - 1)
    valid = in_range & (uniq_keys[pos_c] == qpacked)
    groups_arr = np.where(valid, pos_c, -1).astype(np.int64)

    cdef double[:, ::1] pts = points
    cdef double[:, ::1] ctr = centers
    cdef long long[::1] order = order_arr
    cdef long long[::1] starts = starts_arr
    cdef long long[:, ::1] groups = groups_arr
    cdef long long[::1] counts = counts_arr
    cdef double r2 = radius * radius
    cdef long long* scratch = <long long*> malloc(n * sizeof(long long))
    if scratch == NULL:
        raise MemoryError()

    cdef long i, c, j, g, mcount, total
    cdef double dx, dy, dz, cx, cy, cz
    try:
        # Pass 1: capped neighbor counts.
        total = 0
        with nogil:
            for i in range(m):
                cx = ctr[i, 0]
                cy = ctr[i, 1]
                cz = ctr[i, 2]
                mcount = 0
                for c in range(27):
                    g = groups[i, c]
                    if g < 0:
                        continue
                    for j in range(starts[g], starts[g + 1]):
                        dx = pts[order[j], 0] - cx
                        dy = pts[order[j], 1] - cy
                        dz = pts[order[j], 2] - cz
                        if dx * dx + dy * dy + dz * dz <= r2:
                            mcount += 1
                if mcount > cap:
                    mcount = cap
                counts[i] = mcount
        total = int(np.sum(counts_arr))
        flat_arr = np.empty(total, dtype=np.int64)
        if total:
            _fill(pts, ctr, order, starts, groups, r2, cap, scratch, flat_arr)
        return counts_arr, flat_arr
    finally:
        free(scratch)


cdef void _fill(double[:, ::1] pts, double[:, ::1] ctr, long long[::1] order,
                long long[::1] starts, long long[:, ::1] groups, double r2,
                long cap, long long* scratch, flat_arr):
    cdef long long[::1] flat = flat_arr
    cdef long m = ctr.shape[0]
    cdef long i, c, j, g, k, mcount
    cdef long long out = 0
    cdef double dx, dy, dz, cx, cy, cz
    with nogil:
        for i in range(m):
            cx = ctr[i, 0]
            cy = ctr[i, 1]
            cz = ctr[i, 2]
            mcount = 0
            for c in range(27):
                g = groups[i, c]
                if g < 0:
                    continue
                for j in range(starts[g], starts[g + 1]):
                    dx = pts[order[j], 0] - cx
                    dy = pts[order[j], 1] - cy
                    dz = pts[order[j], 2] - cz
                    if dx * dx + dy * dy + dz * dz <= r2:
                        scratch[mcount] = order[j]
                        mcount += 1
            qsort(scratch, mcount, sizeof(long long), _cmp_i64)
            if mcount > cap:
                mcount = cap
            for k in range(mcount):
                flat[out] = scratch[k]
                out += 1
