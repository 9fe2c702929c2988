"""2D review snapshots: maximum-label projections written as binary PPM."""

from __future__ import annotations

import colorsys

import numpy as np

from .volume import LabelVolume

CORONAL, SAGITTAL = "coronal", "sagittal"
# projection axis and the in-plane (column) axis; rows always run superior -> inferior
PLANES = {CORONAL: (1, 0), SAGITTAL: (0, 1)}
PATH_COLOR = (255, 255, 255)


def label_color(label: int) -> tuple[int, int, int]:
    """Fixed color per label: golden-ratio hue walk, black background."""
    if label == 0:
        return (0, 0, 0)
    hue = (label * 0.618033988749895) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.75, 0.95)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def project(vol: LabelVolume, plane: str) -> np.ndarray:
    """Max-label image of shape (rows=k reversed, cols=in-plane axis)."""
    if plane not in PLANES:
        raise ValueError(f"plane must be one of {sorted(PLANES)}, got {plane!r}")
    axis, _ = PLANES[plane]
    img = vol.data.max(axis=axis)  # (col axis, k)
    return img.T[::-1]


def render(volumes, plane: str, paths=()) -> np.ndarray:
    """RGB image; later volumes paint over earlier ones where they are non-zero."""
    volumes = list(volumes)
    if not volumes:
        raise ValueError("need at least one volume")
    base = volumes[0]
    labels = np.zeros_like(project(base, plane), dtype=np.int64)
    for vol in volumes:
        if vol.dims != base.dims:
            raise ValueError("snapshot volumes must share a grid")
        img = project(vol, plane)
        labels = np.where(img > 0, img, labels)
    lut_labels = np.unique(labels)
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    for lab in lut_labels:
        rgb[labels == lab] = label_color(int(lab))
    _, col_axis = PLANES[plane]
    inv = np.linalg.inv(base.affine)
    n_rows = labels.shape[0]
    for pts in paths:
        pts = np.asarray(pts, float).reshape(-1, 3)
        ijk = np.floor(pts @ inv[:3, :3].T + inv[:3, 3] + 0.5).astype(int)
        for v in ijk:
            row, col = n_rows - 1 - v[2], v[col_axis]
            if 0 <= row < n_rows and 0 <= col < labels.shape[1]:
                rgb[row, col] = PATH_COLOR
    return rgb


def to_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def snapshot(volumes, plane: str, paths=()) -> bytes:
    return to_ppm(render(volumes, plane, paths))


def read_ppm(raw: bytes) -> np.ndarray:
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
