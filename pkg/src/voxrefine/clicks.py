"""Simulated annotator: error-region extraction and click placement.

Errors between a binarized prediction and the ground truth come in two
kinds: false negatives (truth 1, prediction 0) get object clicks, false
positives (truth 0, prediction 1) get background clicks. Regions of both
kinds are ranked together by voxel count, largest first, so the clicks
always target the biggest remaining mistakes.

Three interaction modes:

* ``good`` -- click near the center of the top-ranked regions, with
  bounded integer jitter to mimic imprecise humans.
* ``bad`` -- uniformly random voxels with random labels (adversarial).
* ``without`` -- no clicks at all; the hint channels are filled with
  fresh uniform noise every step instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geodesy import HintMaps
from .volumes import Dims, LabelMask, Volume3D, VoxelCoord

INTERACTION_MODES = ("good", "without", "bad")


@dataclass(frozen=True)
class OracleConfig:
    n_click: int = 5
    noise_halfwidth: int = 3
    mode: str = "good"
    connectivity: int = 26
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_click < 0:
            raise ValueError("n_click must be >= 0")
        if self.noise_halfwidth < 0:
            raise ValueError("noise_halfwidth must be >= 0")
        if self.mode not in INTERACTION_MODES:
            raise ValueError(f"mode must be one of {INTERACTION_MODES}, got {self.mode!r}")
        if self.connectivity not in (6, 26):
            raise ValueError("connectivity must be 6 or 26")


@dataclass(frozen=True, eq=False)
class ErrorRegion:
    """One connected component of mislabeled voxels."""

    voxels: np.ndarray  # (n, 3) int coordinates
    kind: str  # "false-negative" | "false-positive"
    center: VoxelCoord

    @property
    def size(self) -> int:
        return self.voxels.shape[0]


def _region_center(coords: np.ndarray) -> VoxelCoord:
    centroid = coords.mean(axis=0)
    d2 = ((coords - centroid) ** 2).sum(axis=1)
    best = np.flatnonzero(d2 == d2.min())
    # among nearest voxels, lowest linear index wins, and coords arrive
    # sorted by linear index already
    pick = coords[best[0]]
    return (int(pick[0]), int(pick[1]), int(pick[2]))


def _extract_regions(mask: np.ndarray, kind: str, connectivity: int,
                     dims: Dims) -> list[tuple[int, int, ErrorRegion]]:
    if not mask.any():
        return []
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labeled, count = ndimage.label(mask, structure=structure)
    nx, ny, _ = dims
    lin = np.arange(mask.size).reshape(dims, order="F")
    out = []
    for k in range(1, count + 1):
        sel = labeled == k
        lin_k = lin[sel]
        order = np.argsort(lin_k)
        coords = np.argwhere(sel)[order]
        region = ErrorRegion(voxels=coords, kind=kind, center=_region_center(coords))
        out.append((coords.shape[0], int(lin_k[order[0]]), region))
    return out


def label_error_regions(pred: LabelMask, truth: LabelMask,
                        connectivity: int = 26) -> list[ErrorRegion]:
    """Connected error components, largest first; ties by lowest linear index."""
    if pred.dims != truth.dims:
        raise ValueError("prediction and truth dims differ")
    fn = (truth.data == 1.0) & (pred.data == 0.0)
    fp = (truth.data == 0.0) & (pred.data == 1.0)
    tagged = _extract_regions(fn, "false-negative", connectivity, pred.dims)
    tagged += _extract_regions(fp, "false-positive", connectivity, pred.dims)
    tagged.sort(key=lambda t: (-t[0], t[1]))
    return [r for _, _, r in tagged]


@dataclass(frozen=True)
class ClickBatch:
    """Clicks produced for one refinement step."""

    object_clicks: tuple[VoxelCoord, ...] = ()
    background_clicks: tuple[VoxelCoord, ...] = ()
    noise_hints: bool = False

    def count(self) -> int:
        return len(self.object_clicks) + len(self.background_clicks)


def sample_clicks(regions: list[ErrorRegion], cfg: OracleConfig, dims: Dims,
                  rng: np.random.Generator | None = None) -> ClickBatch:
    """Place this step's clicks according to the interaction mode."""
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    if cfg.mode == "without":
        return ClickBatch(noise_hints=True)
    if cfg.mode == "bad":
        obj, bg = [], []
        for _ in range(cfg.n_click):
            coord = tuple(int(rng.integers(0, d)) for d in dims)
            (obj if rng.integers(0, 2) == 1 else bg).append(coord)
        return ClickBatch(tuple(obj), tuple(bg))
    obj, bg = [], []
    hw = cfg.noise_halfwidth
    bound = np.asarray(dims) - 1
    for region in regions[: cfg.n_click]:
        coord = np.asarray(region.center)
        if hw > 0:
            coord = np.clip(coord + rng.integers(-hw, hw + 1, size=3), 0, bound)
        coord = (int(coord[0]), int(coord[1]), int(coord[2]))
        (obj if region.kind == "false-negative" else bg).append(coord)
    return ClickBatch(tuple(obj), tuple(bg))


def noise_hint_maps(dims: Dims, rng: np.random.Generator) -> HintMaps:
    """Uniform-noise guidance channels for the interaction-free mode."""
    return HintMaps(
        object_map=Volume3D(rng.random(dims)),
        background_map=Volume3D(rng.random(dims)),
    )
