"""Nearest-neighbour kernels behind Chamfer distance.

Two interchangeable back ends compute, for every query point, the squared
distance to its nearest reference point:

* numba ``@njit`` loops (brute force for small clouds, a uniform-grid
  spatial hash for large ones), used by default;
* a chunked pure-numpy brute force, selected when numba is missing or when
  ``SLATMORPH_NO_NUMBA=1`` is set in the environment.

Both evaluate the distance as ``dx*dx + dy*dy + dz*dz`` in that order, so the
per-point minima are bit-identical across back ends.
"""

from __future__ import annotations

import os

import numpy as np

GRID_THRESHOLD = 4096
_CHUNK = 1024

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("SLATMORPH_NO_NUMBA", "") not in ("1", "true", "yes")


def nearest_sq_dists_numpy(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    out = np.empty(query.shape[0], dtype=np.float64)
    for lo in range(0, query.shape[0], _CHUNK):
        q = query[lo:lo + _CHUNK]
        dx = q[:, None, 0] - ref[None, :, 0]
        dy = q[:, None, 1] - ref[None, :, 1]
        dz = q[:, None, 2] - ref[None, :, 2]
        out[lo:lo + _CHUNK] = (dx * dx + dy * dy + dz * dz).min(axis=1)
    return out


if HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def _nn_brute(query, ref):
        n = query.shape[0]
        m = ref.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            qx = query[i, 0]
            qy = query[i, 1]
            qz = query[i, 2]
            best = np.inf
            for j in range(m):
                dx = qx - ref[j, 0]
                dy = qy - ref[j, 1]
                dz = qz - ref[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
            out[i] = best
        return out

    @njit(cache=True, nogil=True)
    def _nn_grid(query, ref):
        m = ref.shape[0]
        cells = max(1, int((m / 2.0) ** (1.0 / 3.0)))
        lo = np.empty(3)
        hi = np.empty(3)
        for a in range(3):
            lo[a] = ref[:, a].min()
            hi[a] = ref[:, a].max()
        extent = max(hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2])
        if extent <= 0.0:
            cells = 1
            h = 1.0
        else:
            h = extent / cells

        # counting sort of reference points into cells
        cell_of = np.empty(m, dtype=np.int64)
        counts = np.zeros(cells * cells * cells + 1, dtype=np.int64)
        for j in range(m):
            c = 0
            for a in range(3):
                k = int((ref[j, a] - lo[a]) / h)
                if k >= cells:
                    k = cells - 1
                c = c * cells + k
            cell_of[j] = c
            counts[c + 1] += 1
        for c in range(cells * cells * cells):
            counts[c + 1] += counts[c]
        fill = counts[:-1].copy()
        order = np.empty(m, dtype=np.int64)
        for j in range(m):
            c = cell_of[j]
            order[fill[c]] = j
            fill[c] += 1

        n = query.shape[0]
        out = np.empty(n, dtype=np.float64)
        qc = np.empty(3, dtype=np.int64)
        for i in range(n):
            qx = query[i, 0]
            qy = query[i, 1]
            qz = query[i, 2]
            for a in range(3):
                k = int(np.floor((query[i, a] - lo[a]) / h))
                if k < 0:
                    k = 0
                elif k >= cells:
                    k = cells - 1
                qc[a] = k
            best = np.inf
            r = 0
            while True:
                for cx in range(max(qc[0] - r, 0), min(qc[0] + r, cells - 1) + 1):
                    for cy in range(max(qc[1] - r, 0), min(qc[1] + r, cells - 1) + 1):
                        for cz in range(max(qc[2] - r, 0), min(qc[2] + r, cells - 1) + 1):
                            if (abs(cx - qc[0]) != r and abs(cy - qc[1]) != r
                                    and abs(cz - qc[2]) != r):
                                continue
                            c = (cx * cells + cy) * cells + cz
                            for s in range(counts[c], counts[c + 1]):
                                j = order[s]
                                dx = qx - ref[j, 0]
                                dy = qy - ref[j, 1]
                                dz = qz - ref[j, 2]
                                d = dx * dx + dy * dy + dz * dz
                                if d < best:
                                    best = d
                # unvisited points are at least r*h away along some axis
                bound = r * h
                if best <= bound * bound or r >= cells:
                    break
                r += 1
            out[i] = best
        return out


def nearest_sq_dists(query: np.ndarray, ref: np.ndarray, use_numba: bool | None = None) -> np.ndarray:
    """Squared distance from each row of ``query`` to its nearest row of ``ref``."""
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if not use_numba:
        return nearest_sq_dists_numpy(query, ref)
    if max(query.shape[0], ref.shape[0]) >= GRID_THRESHOLD:
        return _nn_grid(query, ref)
    return _nn_brute(query, ref)
