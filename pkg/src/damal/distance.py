"""Class surfaces, exact Euclidean distance fields and surface attention weight maps."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .volume import LabelVolume


class EmptySurfaceError(ValueError):
    pass


@dataclass(frozen=True)
class SurfaceSet:
    class_id: int
    mask: np.ndarray  # bool, full volume

    @property
    def voxels(self) -> np.ndarray:
        """Surface coordinates as an (n, 3) integer array."""
        return np.argwhere(self.mask)

    def __len__(self):
        return int(self.mask.sum())


@dataclass(frozen=True)
class DistanceField:
    data: np.ndarray
    class_id: int


@dataclass
class WeightMapSet:
    maps: np.ndarray  # (C, H, W, D) float32
    warnings: List[str] = field(default_factory=list)

    def __getitem__(self, c: int) -> np.ndarray:
        return self.maps[c]

    def __len__(self):
        return self.maps.shape[0]


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def surface_mask(mask: np.ndarray, connectivity: int = 6) -> np.ndarray:
    """Voxels of ``mask`` with a neighbour outside it; the grid border counts as outside."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_structure(connectivity), border_value=0)
    return mask & ~interior


def extract_surface(labels: LabelVolume, c: int, connectivity: int = 6) -> SurfaceSet:
    if not 0 <= c < labels.num_classes:
        raise ValueError(f"class {c} out of range for {labels.num_classes} classes")
    mask = labels.data == c
    if not mask.any():
        raise EmptySurfaceError(f"class {c} absent from label volume; surface is empty")
    return SurfaceSet(c, surface_mask(mask, connectivity))


def distance_transform(surface: SurfaceSet, dims=None,
                       spacing: Optional[Sequence[float]] = None) -> DistanceField:
    """L2 distance from every voxel to the nearest surface voxel."""
    if dims is not None and tuple(dims) != surface.mask.shape:
        raise ValueError(f"dims {tuple(dims)} do not match surface grid {surface.mask.shape}")
    if not surface.mask.any():
        raise EmptySurfaceError(f"class {surface.class_id}: empty surface")
    d = ndimage.distance_transform_edt(~surface.mask, sampling=spacing)
    return DistanceField(np.asarray(d, dtype=np.float64), surface.class_id)


def weights_from_distance(d: np.ndarray) -> np.ndarray:
    return 1.0 / (d + 1.0)


def compute_weight_map(labels: LabelVolume, c: int, connectivity: int = 6,
                       spacing: Optional[Sequence[float]] = None) -> np.ndarray:
    surface = extract_surface(labels, c, connectivity)
    return weights_from_distance(distance_transform(surface, spacing=spacing).data)


def compute_all_weight_maps(labels: LabelVolume, connectivity: int = 6,
                            spacing: Optional[Sequence[float]] = None) -> WeightMapSet:
    """One map per class (background included); absent classes give zeros and a warning."""
    maps = np.zeros((labels.num_classes,) + labels.dims, dtype=np.float32)
    notes = []
    for c in range(labels.num_classes):
        try:
            maps[c] = compute_weight_map(labels, c, connectivity, spacing)
        except EmptySurfaceError as exc:
            notes.append(str(exc))
            warnings.warn(f"weight map for class {c} set to zero: {exc}", RuntimeWarning)
    return WeightMapSet(maps, notes)
