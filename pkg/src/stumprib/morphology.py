"""Mask utilities: resampling, hole filling, components, surfaces, centroids, cropping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelVolume

STRUCT_6 = ndimage.generate_binary_structure(3, 1)
STRUCT_26 = ndimage.generate_binary_structure(3, 3)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return STRUCT_6
    if connectivity == 26:
        return STRUCT_26
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def _binary(mask) -> np.ndarray:
    data = mask.data if isinstance(mask, LabelVolume) else np.asarray(mask)
    return data > 0


def resample_nearest(vol: LabelVolume, target_spacing_mm: float) -> LabelVolume:
    """Nearest-neighbour resampling to isotropic ``target_spacing_mm``.

    The output grid shares the input's field of view corner and axis
    directions, so world positions are preserved.
    """
    if target_spacing_mm <= 0:
        raise ValueError("target spacing must be positive")
    spacing = vol.spacing
    ratio = target_spacing_mm / spacing
    if np.allclose(ratio, 1.0, rtol=0, atol=1e-9):
        return vol
    out_dims = [max(1, math.ceil(n * s / target_spacing_mm - 1e-9)) for n, s in zip(vol.dims, spacing)]
    index_maps = []
    for n_in, n_out, r in zip(vol.dims, out_dims, ratio):
        cont = (np.arange(n_out) + 0.5) * r - 0.5
        index_maps.append(np.clip(np.floor(cont + 0.5).astype(int), 0, n_in - 1))
    data = vol.data[np.ix_(*index_maps)]
    affine = vol.affine.copy()
    affine[:3, :3] = vol.affine[:3, :3] * ratio
    affine[:3, 3] = vol.affine[:3, :3] @ (0.5 * ratio - 0.5) + vol.affine[:3, 3]
    return LabelVolume(data, affine)


def fill_holes(mask: LabelVolume) -> LabelVolume:
    """Fill background cavities not 6-connected to the border background."""
    filled = ndimage.binary_fill_holes(_binary(mask), structure=STRUCT_6)
    return mask.with_data(filled.astype(np.uint8))


@dataclass(frozen=True, eq=False)
class ComponentSet:
    labeled: LabelVolume
    count: int
    sizes: np.ndarray  # voxel counts, index 0 -> label 1
    bboxes: list  # (lo, hi) inclusive index bounds per label

    def component(self, label: int) -> LabelVolume:
        return self.labeled.mask(label)


def connected_components(mask: LabelVolume, connectivity: int = 26) -> ComponentSet:
    """Label components; label 1 is the largest, ties broken by first voxel in C order."""
    raw, count = ndimage.label(_binary(mask), structure=_structure(connectivity))
    if count == 0:
        return ComponentSet(mask.with_data(np.zeros(mask.dims, np.int32)), 0, np.zeros(0, int), [])
    flat = raw.ravel()
    sizes = np.bincount(flat, minlength=count + 1)[1:]
    nz = np.flatnonzero(flat)
    first = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[nz], nz)
    order = np.lexsort((first[1:], -sizes))  # old label - 1, in new label order
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, count + 1)
    relabeled = remap[raw]
    objects = ndimage.find_objects(relabeled)
    bboxes = [(tuple(s.start for s in sl), tuple(s.stop - 1 for s in sl)) for sl in objects]
    return ComponentSet(mask.with_data(relabeled), int(count), sizes[order], bboxes)


def centroid(mask: LabelVolume) -> np.ndarray:
    idx = np.argwhere(_binary(mask))
    if len(idx) == 0:
        raise ValueError("centroid of an empty mask")
    return mask.world_coords(idx.mean(axis=0))[0]


def surface_mask(mask) -> np.ndarray:
    """Foreground voxels with a background or out-of-bounds 6-neighbour."""
    fg = _binary(mask)
    interior = ndimage.binary_erosion(fg, structure=STRUCT_6, border_value=0)
    return fg & ~interior


def surface_voxels(mask: LabelVolume) -> set[tuple[int, int, int]]:
    return {tuple(int(c) for c in v) for v in np.argwhere(surface_mask(mask))}


def crop_with_margin(vol: LabelVolume, labels, margin_mm: float) -> LabelVolume:
    """Crop to the bounding box of ``labels`` grown by ``margin_mm`` (clamped to the grid)."""
    sel = np.isin(vol.data, np.atleast_1d(labels))
    idx = np.argwhere(sel)
    if len(idx) == 0:
        raise ValueError(f"labels {labels} absent from volume")
    pad = np.ceil(margin_mm / vol.spacing - 1e-9).astype(int)
    lo = np.maximum(idx.min(axis=0) - pad, 0)
    hi = np.minimum(idx.max(axis=0) + pad, np.array(vol.dims) - 1)
    data = vol.data[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    affine = vol.affine.copy()
    affine[:3, 3] = vol.affine[:3, :3] @ lo + vol.affine[:3, 3]
    return LabelVolume(data, affine)
