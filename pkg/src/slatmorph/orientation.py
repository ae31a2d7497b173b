"""Orientation estimation, jump detection, jump statistics and the
four-candidate yaw correction."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from slatmorph.geometry import ColoredVoxelGrid, SparseStructure, rotate_yaw, structure_chamfer

JUMP_THRESHOLD = 45.0
ISOTROPY_RATIO = 1.05


def wrap_degrees(a: float) -> float:
    """Wrap an angle into (-180, 180]."""
    w = math.fmod(float(a) + 180.0, 360.0)
    if w < 0:
        w += 360.0
    w -= 180.0
    return 180.0 if w == -180.0 else w


@dataclass(frozen=True)
class EulerAngles:
    """Z-Y-X intrinsic angles in degrees, each wrapped into (-180, 180]."""

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        for name in ("yaw", "pitch", "roll"):
            object.__setattr__(self, name, wrap_degrees(getattr(self, name)))

    def as_tuple(self):
        return (self.yaw, self.pitch, self.roll)

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> "EulerAngles":
        """Angles of a proper rotation ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
        yaw = math.degrees(math.atan2(R[1, 0], R[0, 0]))
        pitch = math.degrees(math.asin(max(-1.0, min(1.0, -R[2, 0]))))
        roll = math.degrees(math.atan2(R[2, 1], R[2, 2]))
        return cls(yaw, pitch, roll)


class OrientationUndefined(ValueError):
    pass


ESTIMATORS = ("pca", "ground_truth")


def _orient_sign(axis: np.ndarray) -> np.ndarray:
    s = axis.sum()
    if abs(s) < 1e-9:
        s = axis[np.argmax(np.abs(axis))]
    return axis if s >= 0 else -axis


def estimate_orientation(grid, estimator: str = "pca") -> EulerAngles:
    """Estimate the pose of a voxel object.

    ``pca``: principal axes of the voxel centres, major axis first; each axis
    is flipped so its coordinate sum is positive (largest-magnitude component
    when the sum vanishes), and the third axis is the cross product of the
    first two so the frame is a proper rotation.
    ``ground_truth``: the pose attached to a procedurally built asset.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    structure = grid.structure if isinstance(grid, ColoredVoxelGrid) else grid
    if estimator == "ground_truth":
        pose = getattr(grid, "pose", None)
        if pose is None:
            raise ValueError("ground_truth estimator needs a grid with a known pose")
        return pose
    if len(structure) == 0:
        raise ValueError("cannot estimate orientation of an empty structure")
    pts = structure.voxels.astype(np.float64)
    pts = pts - pts.mean(axis=0)
    cov = pts.T @ pts / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[1] <= 0 or evals[0] / evals[1] < ISOTROPY_RATIO:
        raise OrientationUndefined("orientation undefined: shape is near-isotropic in its top two axes")
    a1 = _orient_sign(evecs[:, 0])
    a2 = _orient_sign(evecs[:, 1])
    a3 = np.cross(a1, a2)
    return EulerAngles.from_matrix(np.stack([a1, a2, a3], axis=1))


def angular_delta(E1: EulerAngles, E2: EulerAngles) -> tuple[float, float, float]:
    """Per-component absolute wrapped difference, each in [0, 180]."""
    return tuple(abs(wrap_degrees(b - a)) for a, b in zip(E1.as_tuple(), E2.as_tuple()))


def detect_jumps(angles, threshold: float = JUMP_THRESHOLD) -> list[int]:
    """Frame indices n >= 1 where any component of the change from frame n-1
    exceeds ``threshold`` degrees."""
    angles = list(angles)
    if len(angles) < 2:
        raise ValueError("jump detection needs at least two frames")
    return [n for n in range(1, len(angles))
            if max(angular_delta(angles[n - 1], angles[n])) > threshold]


def correct_orientation(P_n: SparseStructure, P_prev: SparseStructure) -> tuple[SparseStructure, int]:
    """Pick the yaw quarter turn of ``P_n`` closest (Chamfer) to ``P_prev``.

    Ties go to the smaller number of quarter turns, so an unrotated candidate
    is kept whenever it is at least as close as every rotation.
    """
    if len(P_n) == 0 or len(P_prev) == 0:
        raise ValueError("empty point set")
    best_q, best_P, best_cd = 0, P_n, structure_chamfer(P_n, P_prev)
    for q in (1, 2, 3):
        cand = rotate_yaw(P_n, q)
        cd = structure_chamfer(cand, P_prev)
        if cd < best_cd:
            best_q, best_P, best_cd = q, cand, cd
    return best_P, best_q


# --- statistics ---------------------------------------------------------------

ALPHA_BINS = np.arange(11) / 10.0
YAW_JUMP_CENTERS = (0.0, 90.0, 180.0, 270.0)
ANGLE_BINS = np.linspace(-180.0, 180.0, 13)


@dataclass
class OrientationReport:
    """Histogram rows ``(kind, bin_low, bin_high, count)``."""

    rows: list
    n_jumps: int
    n_sequences: int

    def counts(self, kind: str) -> list[int]:
        return [r[3] for r in self.rows if r[0] == kind]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "bin_low", "bin_high", "count"])
        for kind, lo, hi, count in self.rows:
            w.writerow([kind, f"{lo:g}", f"{hi:g}", count])
        return buf.getvalue()


def _yaw_jump_bin(delta: float) -> int:
    # signed yaw change folded into [0, 360); bin k covers centre k*90 +- 45
    d = math.fmod(delta, 360.0)
    if d < 0:
        d += 360.0
    return int(((d + 45.0) % 360.0) // 90.0)


def orientation_stats(sequences, threshold: float = JUMP_THRESHOLD) -> OrientationReport:
    """Histogram jumps over a set of sequences of ``(alpha, EulerAngles)``.

    Rows: ``alpha_at_jump`` (10 bins on [0, 1]), ``yaw_delta_at_jump`` (bins
    centred on 0/90/180/270 degrees, +-45), and per-frame ``yaw``,
    ``pitch``, ``roll`` (12 bins of 30 degrees on [-180, 180]).
    """
    sequences = [list(s) for s in sequences]
    if not sequences:
        raise ValueError("orientation_stats needs at least one sequence")
    jump_alphas, yaw_bins = [], [0] * len(YAW_JUMP_CENTERS)
    per_axis = {"yaw": [], "pitch": [], "roll": []}
    for seq in sequences:
        if len(seq) < 2:
            raise ValueError("each sequence needs at least two frames")
        alphas = [float(a) for a, _ in seq]
        angles = [e for _, e in seq]
        for e in angles:
            per_axis["yaw"].append(e.yaw)
            per_axis["pitch"].append(e.pitch)
            per_axis["roll"].append(e.roll)
        for n in detect_jumps(angles, threshold):
            jump_alphas.append(alphas[n])
            yaw_bins[_yaw_jump_bin(angles[n].yaw - angles[n - 1].yaw)] += 1

    rows = []
    hist, _ = np.histogram(jump_alphas, bins=ALPHA_BINS)
    rows += [("alpha_at_jump", float(ALPHA_BINS[i]), float(ALPHA_BINS[i + 1]), int(c)) for i, c in enumerate(hist)]
    rows += [("yaw_delta_at_jump", c - 45.0, c + 45.0, yaw_bins[i]) for i, c in enumerate(YAW_JUMP_CENTERS)]
    for kind, vals in per_axis.items():
        hist, _ = np.histogram(vals, bins=ANGLE_BINS)
        rows += [(kind, float(ANGLE_BINS[i]), float(ANGLE_BINS[i + 1]), int(c)) for i, c in enumerate(hist)]
    return OrientationReport(rows, n_jumps=len(jump_alphas), n_sequences=len(sequences))
