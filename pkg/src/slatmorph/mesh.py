"""Vertex-coloured cube meshes (Wavefront OBJ) for voxel grids."""

from __future__ import annotations

import numpy as np

from slatmorph.geometry import ColoredVoxelGrid

_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                     [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.int64)
# outward-facing triangles, 1-based corner indices
_TRIS = np.array([[1, 3, 2], [1, 4, 3],   # z-
                  [5, 6, 7], [5, 7, 8],   # z+
                  [1, 2, 6], [1, 6, 5],   # y-
                  [4, 8, 7], [4, 7, 3],   # y+
                  [1, 5, 8], [1, 8, 4],   # x-
                  [2, 3, 7], [2, 7, 6]],  # x+
                 dtype=np.int64)


def obj_text(grid: ColoredVoxelGrid) -> str:
    """One cube (8 vertices, 12 triangles) per voxel in unit-cube coordinates,
    each vertex carrying its voxel's RGB."""
    G = grid.structure.resolution
    lines = [f"# slatmorph voxel mesh: {len(grid.structure)} voxels, grid {G}"]
    for v, rgb in zip(grid.structure.voxels, grid.colors):
        r, g, b = (float(c) for c in rgb)
        for corner in _CORNERS:
            x, y, z = (v + corner) / G
            lines.append(f"v {x:.6f} {y:.6f} {z:.6f} {r:.6f} {g:.6f} {b:.6f}")
    for i in range(len(grid.structure)):
        for a, b, c in _TRIS + 8 * i:
            lines.append(f"f {a} {b} {c}")
    return "\n".join(lines) + "\n"
