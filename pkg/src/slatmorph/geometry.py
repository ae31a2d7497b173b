"""Sparse voxel structures, quarter-turn yaw rotation, Chamfer distance and
sinusoidal position features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from slatmorph import _kernels


@dataclass(frozen=True, eq=False)
class SparseStructure:
    """Set of active voxels on a ``resolution``³ grid.

    ``voxels`` is an ``(L, 3)`` int64 array kept in lexicographic (x, y, z)
    order, so two structures are equal exactly when their arrays are.
    """

    resolution: int
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        G = int(self.resolution)
        if G < 1:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        v = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        if v.size and (v.min() < 0 or v.max() >= G):
            raise ValueError(f"voxel coordinates out of bounds for resolution {G}")
        if len(v):
            v = v[np.lexsort((v[:, 2], v[:, 1], v[:, 0]))]
            if np.any(np.all(v[1:] == v[:-1], axis=1)):
                raise ValueError("duplicate voxel coordinates")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "resolution", G)
        object.__setattr__(self, "voxels", v)

    def __len__(self):
        return len(self.voxels)

    def __eq__(self, other):
        if not isinstance(other, SparseStructure):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(self.voxels, other.voxels)

    def __hash__(self):
        return hash((self.resolution, self.voxels.tobytes()))

    @classmethod
    def from_dense(cls, mask: np.ndarray) -> "SparseStructure":
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 3 or len(set(mask.shape)) != 1:
            raise ValueError(f"expected a cubic occupancy grid, got shape {mask.shape}")
        # argwhere on a C-ordered array is already lexicographic
        return cls(mask.shape[0], np.argwhere(mask))

    def to_dense(self) -> np.ndarray:
        G = self.resolution
        mask = np.zeros((G, G, G), dtype=bool)
        if len(self):
            mask[self.voxels[:, 0], self.voxels[:, 1], self.voxels[:, 2]] = True
        return mask

    def flat_indices(self) -> np.ndarray:
        """Row-major indices of the voxels in the dense ``G³`` grid."""
        G = self.resolution
        v = self.voxels
        return (v[:, 0] * G + v[:, 1]) * G + v[:, 2]


@dataclass(frozen=True, eq=False)
class ColoredVoxelGrid:
    """Occupied voxels with one RGB triple in [0, 1] per voxel.

    ``pose`` is only set for procedurally built assets whose orientation is
    known by construction.
    """

    structure: SparseStructure
    colors: np.ndarray = field(repr=False)
    pose: object = None

    def __post_init__(self):
        colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(colors) != len(self.structure):
            raise ValueError(f"{len(colors)} colors for {len(self.structure)} voxels")
        object.__setattr__(self, "colors", colors)


def rotate_yaw(P: SparseStructure, quarter_turns: int) -> SparseStructure:
    """Rotate counter-clockwise about the vertical (+z) centre line.

    One quarter turn maps ``(x, y, z) -> (G-1-y, x, z)``; this is exact on
    the lattice.
    """
    if quarter_turns not in (0, 1, 2, 3):
        raise ValueError(f"quarter_turns must be in 0..3, got {quarter_turns!r}")
    if quarter_turns == 0:
        return P
    G = P.resolution
    v = P.voxels.copy()
    for _ in range(quarter_turns):
        v = np.stack([G - 1 - v[:, 1], v[:, 0], v[:, 2]], axis=1)
    return SparseStructure(G, v)


def to_point_cloud(P: SparseStructure) -> np.ndarray:
    """Voxel centres ``(v + 0.5) / G`` in the unit cube, shape ``(L, 3)``."""
    return (P.voxels.astype(np.float64) + 0.5) / P.resolution


def chamfer_distance(A: np.ndarray, B: np.ndarray, use_numba: bool | None = None) -> float:
    """Symmetric squared Chamfer distance between two point clouds.

    Mean nearest-neighbour squared distance A→B plus B→A. Sums are exactly
    rounded (``math.fsum``) so the value does not depend on summation order.
    """
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("empty point set")
    d_ab = _kernels.nearest_sq_dists(A, B, use_numba)
    d_ba = _kernels.nearest_sq_dists(B, A, use_numba)
    return math.fsum(d_ab) / len(A) + math.fsum(d_ba) / len(B)


def structure_chamfer(P: SparseStructure, Q: SparseStructure) -> float:
    return chamfer_distance(to_point_cloud(P), to_point_cloud(Q))


def _frequencies(count: int, G: int) -> np.ndarray:
    # geometric ladder from pi/G (injective over [0, G)) up to pi/2
    if count == 1:
        return np.array([math.pi / G])
    ratio = max(G / 2.0, 1.0)
    return (math.pi / G) * ratio ** (np.arange(count) / (count - 1))


def sinusoid_features(coords: np.ndarray, d: int, G: int) -> np.ndarray:
    """Sin/cos features of real-valued coordinates, shape ``(n, d)``.

    The ``d // 2`` frequency pairs are dealt round-robin over the coordinate
    axes; the first half of the output holds sines, the second half cosines.
    """
    if d <= 0 or d % 2:
        raise ValueError(f"encoding width must be a positive even integer, got {d}")
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    n_axes = coords.shape[1]
    pairs = d // 2
    axis_of = np.arange(pairs) % n_axes
    slot = np.arange(pairs) // n_axes
    omega = np.empty(pairs)
    for a in range(n_axes):
        sel = axis_of == a
        omega[sel] = _frequencies(int(sel.sum()), G)[slot[sel]] if sel.any() else 0.0
    phase = coords[:, axis_of] * omega
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def positional_encoding(p, d: int, G: int) -> np.ndarray:
    """Encoding of one integer grid position ``p = (x, y, z)``."""
    p = tuple(int(c) for c in p)
    if len(p) != 3:
        raise ValueError("position must be a triple")
    if any(c < 0 or c >= G for c in p):
        raise ValueError(f"position {p} outside grid of resolution {G}")
    return sinusoid_features(np.array([p], dtype=np.float64), d, G)[0]


# --- .ssv text format -------------------------------------------------------

def format_ssv(P: SparseStructure) -> str:
    lines = [f"SSV1 {P.resolution} {len(P)}"]
    lines.extend(f"{x} {y} {z}" for x, y, z in P.voxels.tolist())
    return "\n".join(lines) + "\n"


def parse_ssv(text: str) -> SparseStructure:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty .ssv file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "SSV1":
        raise ValueError(f"bad .ssv header: {lines[0]!r}")
    G, count = int(head[1]), int(head[2])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ValueError(f".ssv declares {count} voxels but holds {len(body)}")
    voxels = np.array([[int(t) for t in ln.split()] for ln in body], dtype=np.int64).reshape(-1, 3)
    P = SparseStructure(G, voxels)
    if not np.array_equal(P.voxels, voxels):
        raise ValueError(".ssv voxels are not in canonical order")
    return P


def write_ssv(path, P: SparseStructure) -> None:
    Path(path).write_text(format_ssv(P))


def read_ssv(path) -> SparseStructure:
    return parse_ssv(Path(path).read_text())
