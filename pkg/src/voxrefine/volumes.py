"""Dense 3D grid value types shared across the refinement engine.

Every volume is an (nx, ny, nz) float64 array. The canonical linear order
is x-fastest: flat(x, y, z) = x + nx * (y + ny * z). All modules that
serialize voxels, rank voxels, or break ties do so in this order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Dims = tuple[int, int, int]
VoxelCoord = tuple[int, int, int]


def linear_index(coord: VoxelCoord, dims: Dims) -> int:
    """Flat index of a voxel in x-fastest order."""
    x, y, z = coord
    nx, ny, _ = dims
    return int(x) + nx * (int(y) + ny * int(z))


def coord_from_linear(index: int, dims: Dims) -> VoxelCoord:
    """Inverse of :func:`linear_index`."""
    nx, ny, _ = dims
    x = index % nx
    rest = index // nx
    return (int(x), int(rest % ny), int(rest // ny))


def in_bounds(coord: VoxelCoord, dims: Dims) -> bool:
    return all(0 <= c < n for c, n in zip(coord, dims))


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Immutable dense scalar grid.

    Wrapping an existing float64 array freezes that buffer in place
    (single-owner builder pattern); other dtypes are copied.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.size == 0:
            raise ValueError(f"expected a non-empty 3D array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        self._validate()

    def _validate(self) -> None:
        pass

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        """Values in x-fastest linear order."""
        return self.data.ravel(order="F")

    def at(self, coord: VoxelCoord) -> float:
        return float(self.data[coord])


@dataclass(frozen=True, eq=False)
class ProbabilityMap(Volume3D):
    """Volume of per-voxel foreground probabilities in [0, 1]."""

    def _validate(self) -> None:
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class LabelMask(Volume3D):
    """Volume whose values are exactly 0.0 or 1.0."""

    def _validate(self) -> None:
        d = self.data
        if not ((d == 0.0) | (d == 1.0)).all():
            raise ValueError("labels must be exactly 0 or 1")

    def foreground_count(self) -> int:
        return int(self.data.sum())


def binarize(prob: ProbabilityMap | Volume3D, threshold: float = 0.5) -> LabelMask:
    """Threshold a probability map; voxels with value >= threshold become 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly inside (0, 1), got {threshold}")
    return LabelMask((prob.data >= threshold).astype(np.float64))


def elementwise_clip(vol: Volume3D, lo: float, hi: float) -> Volume3D:
    if lo > hi:
        raise ValueError(f"empty clip range [{lo}, {hi}]")
    return Volume3D(np.clip(vol.data, lo, hi))
