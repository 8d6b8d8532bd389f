"""Interactive 3D segmentation refinement driven by per-voxel reinforcement learning."""

from __future__ import annotations

__version__ = "0.1.0"

from .volumes import LabelMask, ProbabilityMap, Volume3D, binarize

__all__ = [
    "LabelMask",
    "ProbabilityMap",
    "Volume3D",
    "binarize",
    "__version__",
]
