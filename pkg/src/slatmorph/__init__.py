"""Training-free 3D morphing over sparse-voxel structured latents, at desk scale."""

from slatmorph.geometry import ColoredVoxelGrid, SparseStructure, structure_chamfer
from slatmorph.pipeline import MorphConfig, MorphError, generate, morph

__version__ = "0.1.0"

__all__ = [
    "ColoredVoxelGrid",
    "MorphConfig",
    "MorphError",
    "SparseStructure",
    "generate",
    "morph",
    "structure_chamfer",
]
