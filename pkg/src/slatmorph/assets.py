"""Procedural source/target objects.

An :class:`AssetDescriptor` deterministically yields a ground-truth sparse
structure, its condition tokens and its known pose. Footprints are drawn on
a 4 x 4 design lattice (each cell ``G/4`` voxels wide) and extruded around
the vertical centre of the grid; ``blob`` is a voxelised ball.

Condition tokens play the role of image patch features: each token covers
one footprint patch and carries the patch's mean column height, a colour,
four style channels and texture channels hashed from the descriptor.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from slatmorph.flow_model import ConditionTokens, ModelConfig, condition_from_image, read_ctok, write_ctok
from slatmorph.geometry import SparseStructure, read_ssv, rotate_yaw, write_ssv
from slatmorph.orientation import EulerAngles

FAMILIES = ("bar", "ell", "tee", "cross", "blob")

_LATTICE = 4
_FOOTPRINTS = {
    "ell": [(i, 1) for i in range(4)] + [(0, 2), (0, 3)],
    "tee": [(i, 1) for i in range(4)] + [(1, 2), (1, 3)],
    "cross": [(1, 0), (2, 0), (0, 1), (1, 1), (2, 1), (3, 1),
              (0, 2), (1, 2), (2, 2), (3, 2), (1, 3), (2, 3)],
}


@dataclass(frozen=True)
class AssetDescriptor:
    """``size`` is the bar length in lattice cells (1-4) or the blob radius in
    voxels; other families ignore it. ``yaw`` counts counter-clockwise
    quarter turns."""

    family: str
    size: int | None = None
    height: int = 4
    yaw: int = 0
    color_seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown asset family {self.family!r}; expected one of {FAMILIES}")
        if self.yaw not in (0, 1, 2, 3):
            raise ValueError(f"yaw must be a quarter-turn count in 0..3, got {self.yaw}")
        if self.height < 2 or self.height % 2:
            raise ValueError(f"height must be an even number >= 2, got {self.height}")
        if self.family == "bar" and self.size is not None and not 1 <= self.size <= 4:
            raise ValueError("bar size (length in cells) must be within 1..4")
        if self.family == "blob" and self.size is not None and self.size < 1:
            raise ValueError("blob size (radius) must be positive")

    def key(self) -> str:
        d = asdict(self)
        d.pop("yaw")
        return json.dumps(d, sort_keys=True)

    def hash_seed(self) -> int:
        return int.from_bytes(hashlib.sha256(self.key().encode()).digest()[:8], "little")

    @classmethod
    def parse(cls, text: str) -> "AssetDescriptor":
        """Parse ``family[,key=value...]``, e.g. ``bar,yaw=1,color_seed=3``."""
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty asset descriptor")
        kwargs = {}
        for p in parts[1:]:
            k, sep, v = p.partition("=")
            if not sep or k not in ("size", "height", "yaw", "color_seed"):
                raise ValueError(f"bad descriptor field {p!r}")
            kwargs[k] = int(v)
        return cls(parts[0], **kwargs)


@dataclass(frozen=True)
class Asset:
    descriptor: AssetDescriptor
    structure: SparseStructure
    condition: ConditionTokens
    pose: EulerAngles


def _footprint_structure(desc: AssetDescriptor, G: int) -> SparseStructure:
    if G % _LATTICE:
        raise ValueError(f"grid {G} must be divisible by {_LATTICE}")
    if desc.height > G:
        raise ValueError(f"height {desc.height} exceeds grid {G}")
    mask = np.zeros((G, G, G), dtype=bool)
    if desc.family == "blob":
        r = desc.size if desc.size is not None else 5
        c = (G - 1) / 2.0
        idx = np.indices((G, G, G)).astype(np.float64)
        mask = ((idx - c) ** 2).sum(axis=0) <= r * r
    else:
        if desc.family == "bar":
            length = desc.size if desc.size is not None else 4
            start = (_LATTICE - length) // 2
            cells = [(i, 1) for i in range(start, start + length)]
        else:
            cells = _FOOTPRINTS[desc.family]
        cell = G // _LATTICE
        z0 = G // 2 - desc.height // 2
        for u, v in cells:
            mask[u * cell:(u + 1) * cell, v * cell:(v + 1) * cell, z0:z0 + desc.height] = True
    if not mask.any():
        raise ValueError("asset has no voxels")
    return SparseStructure.from_dense(mask)


def _patch_heights(P: SparseStructure, side: int) -> np.ndarray:
    G = P.resolution
    cell = G // side
    extent = P.to_dense().sum(axis=2) / G
    return extent.reshape(side, cell, side, cell).mean(axis=(1, 3))


def build_asset(desc: AssetDescriptor, config: ModelConfig | None = None) -> Asset:
    cfg = config or ModelConfig()
    G, side = cfg.grid, cfg.cond_side
    base = _footprint_structure(desc, G)
    P = rotate_yaw(base, desc.yaw)

    rng = np.random.default_rng([desc.hash_seed(), desc.color_seed])
    color = rng.uniform(0.2, 0.8, size=3)
    rgb = np.clip(color + 0.06 * rng.standard_normal((side, side, 3)), 0.0, 1.0)
    style = 0.3 * rng.standard_normal((side, side, 4))
    texture = 0.5 * rng.standard_normal((side, side, cfg.cond_dim - 16 - 8))
    # patch attributes are drawn in the object frame and turn with it
    rgb, style, texture = (np.rot90(a, desc.yaw, axes=(0, 1)) for a in (rgb, style, texture))

    cond = condition_from_image(cfg, _patch_heights(P, side).ravel(), rgb.reshape(-1, 3),
                                style.reshape(-1, 4), texture.reshape(side * side, -1))
    return Asset(desc, P, cond, EulerAngles(yaw=90.0 * desc.yaw))


def write_asset(out_dir, asset: Asset) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ssv(out / "asset.ssv", asset.structure)
    write_ctok(out / "asset.ctok", asset.condition)
    pose = {"descriptor": asdict(asset.descriptor),
            "pose": {"yaw": asset.pose.yaw, "pitch": asset.pose.pitch, "roll": asset.pose.roll}}
    (out / "pose.json").write_text(json.dumps(pose, indent=2, sort_keys=True) + "\n")


def read_asset(path) -> Asset:
    """Load an asset directory written by :func:`write_asset`."""
    p = Path(path)
    if p.is_file() and p.suffix == ".ctok":
        p = p.parent
    if not (p / "asset.ctok").is_file():
        raise FileNotFoundError(f"no asset found at {path}")
    meta = json.loads((p / "pose.json").read_text()) if (p / "pose.json").is_file() else {}
    desc = AssetDescriptor(**meta["descriptor"]) if "descriptor" in meta else None
    pose = EulerAngles(**meta["pose"]) if "pose" in meta else None
    structure = read_ssv(p / "asset.ssv") if (p / "asset.ssv").is_file() else None
    return Asset(desc, structure, read_ctok(p / "asset.ctok"), pose)
