"""Sequence smoothness and plausibility metrics.

Perceptual distances are taken in the space of a frozen random-projection
embedder, not a learned perceptual network, so absolute values are only
comparable within this package.
"""

from __future__ import annotations

import csv
import io
import json
import math

import numpy as np

from slatmorph.geometry import ColoredVoxelGrid

FEATURE_DIM = 64
EMBED_SEED = 20240607
_SCALES = (1, 2, 4)


def _pooled_stats(grid: ColoredVoxelGrid) -> np.ndarray:
    G = grid.structure.resolution
    if G % max(_SCALES):
        raise ValueError(f"grid resolution {G} must be divisible by {max(_SCALES)}")
    dense = np.zeros((G, G, G, 4))
    v = grid.structure.voxels
    if len(v):
        dense[v[:, 0], v[:, 1], v[:, 2], 0] = 1.0
        dense[v[:, 0], v[:, 1], v[:, 2], 1:] = grid.colors
    stats = []
    for blocks in _SCALES:
        b = G // blocks
        pooled = dense.reshape(blocks, b, blocks, b, blocks, b, 4).mean(axis=(1, 3, 5))
        stats.append(pooled.reshape(-1))
    return np.concatenate(stats)


_STAT_DIM = sum(s ** 3 for s in _SCALES) * 4
_rng = np.random.default_rng(EMBED_SEED)
_PROJ = _rng.standard_normal((_STAT_DIM, FEATURE_DIM)) * (4.0 / math.sqrt(_STAT_DIM))
_BIAS = 0.1 * _rng.standard_normal(FEATURE_DIM)
del _rng


def feature_embed(grid: ColoredVoxelGrid) -> np.ndarray:
    """64-d feature: occupancy and RGB block means at 1³, 2³ and 4³ blocks,
    through a fixed seeded linear projection."""
    return _pooled_stats(grid) @ _PROJ + _BIAS


def adjacent_distances(frames) -> np.ndarray:
    feats = np.array([feature_embed(f) for f in frames])
    return np.linalg.norm(np.diff(feats, axis=0), axis=1)


def _gaps(frames, distances, minimum):
    if distances is None:
        frames = list(frames)
        if len(frames) < minimum:
            raise ValueError(f"need at least {minimum} frames, got {len(frames)}")
        return adjacent_distances(frames)
    d = np.asarray(distances, dtype=np.float64)
    if len(d) < minimum - 1:
        raise ValueError(f"need at least {minimum} frames, got {len(d) + 1}")
    return d


def perceptual_path_length(frames=None, distances=None) -> float:
    """Mean adjacent-frame feature distance. Pass precomputed ``distances``
    to skip embedding."""
    return float(np.mean(_gaps(frames, distances, 2)))


def perceptual_distance_variance(frames=None, distances=None) -> float:
    """Population variance of the adjacent-frame feature distances."""
    return float(np.var(_gaps(frames, distances, 3)))


def frechet_feature_distance(set_a, set_b) -> float:
    """Fréchet distance between diagonal-covariance Gaussians fitted to two
    feature sets: ``|mu_a - mu_b|² + sum_i (sigma_a,i - sigma_b,i)²``."""
    A = np.asarray(set_a, dtype=np.float64)
    B = np.asarray(set_b, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or len(A) < 2 or len(B) < 2:
        raise ValueError("each feature set needs at least two vectors")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    dmu = A.mean(axis=0) - B.mean(axis=0)
    dsd = np.sqrt(A.var(axis=0)) - np.sqrt(B.var(axis=0))
    return float(dmu @ dmu + dsd @ dsd)


def sequence_metrics(frames, reference=None) -> tuple[dict, np.ndarray]:
    """Metrics record plus the per-gap distances behind PPL and PDV."""
    frames = list(frames)
    d = _gaps(frames, None, 3)
    ffd = None
    if reference is not None:
        feats = [feature_embed(f) for f in frames]
        ffd = frechet_feature_distance(feats, [feature_embed(r) for r in reference])
    record = {"ppl": perceptual_path_length(distances=d),
              "pdv": perceptual_distance_variance(distances=d),
              "ffd": ffd, "n_frames": len(frames)}
    return record, d


def metrics_json(record: dict) -> str:
    return json.dumps(record, indent=2) + "\n"


def gaps_csv(distances) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gap", "from_frame", "to_frame", "distance"])
    for i, d in enumerate(distances):
        w.writerow([i, i, i + 1, repr(float(d))])
    return buf.getvalue()
