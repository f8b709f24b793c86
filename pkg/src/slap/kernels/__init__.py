"""Neighbor-search kernels with import-time implementation selection.

The compiled hash-grid kernel is preferred; the NumPy fallback is used when
the extension is unavailable or ``SLAP_PURE_PYTHON`` is set. Both produce
bitwise-identical results, so everything downstream (and every test) is
implementation-agnostic. ``IMPLEMENTATION`` reports which one is active.
"""

import os

import numpy as np

from slap.kernels import _fallback

if os.environ.get("SLAP_PURE_PYTHON"):
    _impl = _fallback
else:
    try:
        from slap.kernels import _native as _impl
    except ImportError:
        _impl = _fallback

IMPLEMENTATION = _impl.IMPLEMENTATION
ball_query = _impl.ball_query

# Hard ceiling on neighbors collected per center before random subsampling;
# bounds kernel memory on pathologically dense clouds.
COLLECT_CAP = 2048


def gather_neighbors(points, centers, radius, max_neighbors, rng=None):
    """Padded neighbor index matrix for set-abstraction grouping.

    Finds points within ``radius`` of each center and packs the result as
    ``(idx, mask)`` with shape ``(n_centers, max_neighbors)``; padding
    entries have index 0 and mask False.

    Centers with more hits than ``max_neighbors`` are randomly subsampled
    when ``rng`` is given (seed-deterministic), otherwise truncated by
    ascending index. Callers that iterate per step (the set-abstraction
    layers) get the same effect cheaper by pre-shuffling their input and
    passing ``rng=None``.
    """
    n_centers = centers.shape[0]
    k = int(max_neighbors)
    if rng is None:
        counts, flat = ball_query(points, centers, radius, k)
    else:
        counts, flat = ball_query(points, centers, radius, COLLECT_CAP)
        if np.any(counts > k):
            center_of = np.repeat(np.arange(n_centers), counts)
            shuffle = np.lexsort((rng.random(flat.shape[0]), center_of))
            flat = flat[shuffle]
    starts = np.concatenate(([0], np.cumsum(counts)))
    kept = np.minimum(counts, k)
    mask = np.arange(k)[None, :] < kept[:, None]
    take = starts[:-1, None] + np.arange(k)[None, :]
    take = np.minimum(take, max(flat.shape[0] - 1, 0))
    idx = np.where(mask, flat[take] if flat.shape[0] else 0, 0)
    return idx.astype(np.int64, copy=False), mask
