#!/usr/bin/env python3
"""Benchmark: numba vs pure-numpy nearest-neighbour kernels behind Chamfer distance.

Usage:
    python3 benchmarks/bench_chamfer.py [--sizes 256 2048 8192] [--repeats 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from slatmorph import _kernels
from slatmorph.geometry import chamfer_distance


def voxel_cloud(rng, n, G=64):
    """``n`` distinct voxel centres of a G^3 grid, as used by structure_chamfer."""
    flat = rng.choice(G ** 3, size=n, replace=False)
    v = np.stack(np.unravel_index(flat, (G, G, G)), axis=1)
    return (v + 0.5) / G


def best_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[256, 2048, 8192])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not _kernels.HAS_NUMBA:
        print("numba is not installed; only the numpy back end can run")
        return 1
    rng = np.random.default_rng(args.seed)
    # compile outside the timed region
    warm = voxel_cloud(rng, _kernels.GRID_THRESHOLD)
    chamfer_distance(warm[:8], warm[8:16], use_numba=True)
    chamfer_distance(warm, warm, use_numba=True)

    print(f"{'points':>8} {'kernel':>6} {'numpy s':>10} {'numba s':>10} {'speed-up':>9}  equal")
    for n in args.sizes:
        A, B = voxel_cloud(rng, n), voxel_cloud(rng, n)
        kernel = "grid" if n >= _kernels.GRID_THRESHOLD else "brute"
        t_np = best_time(lambda: chamfer_distance(A, B, use_numba=False), args.repeats)
        t_nb = best_time(lambda: chamfer_distance(A, B, use_numba=True), args.repeats)
        same = chamfer_distance(A, B, use_numba=False) == chamfer_distance(A, B, use_numba=True)
        print(f"{n:>8} {kernel:>6} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>8.1f}x  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
