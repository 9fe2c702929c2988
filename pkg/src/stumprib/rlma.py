"""Rib length measurement by iterative shell-averaged path stepping.

A rib mask is walked from the point nearest to the vertebral body outward:
every step averages the rib voxels lying on a thin spherical shell around
the latest path point, moves part of the way towards that average and snaps
back onto the mask. When the shell runs off the end of the rib a cone of
rays finds the final point. The length is the polyline length.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .morphology import crop_with_margin, fill_holes, resample_nearest, surface_mask
from .volume import LabelVolume

STUMP_THRESHOLD_MM = 38.0

CONE_END = "cone_end"
NO_CANDIDATES = "no_candidates"
MAX_ITERATIONS = "max_iterations"
TIE_TOL_MM = 1e-6


class IterationLimitError(RuntimeError):
    def __init__(self, path: PathPolyline):
        super().__init__(f"path stepping did not terminate after {len(path.points) - 1} steps")
        self.path = path


@dataclass(frozen=True)
class RlmaConfig:
    shell_min_mm: float = 14.5
    shell_max_mm: float = 15.5
    step_fraction: float = 0.5
    start_refine_radius_mm: float = 5.0
    cone_half_angle_deg: float = 30.0
    cone_ray_count: int = 64
    cone_max_len_mm: float = 20.0
    ray_step_mm: float = 0.25
    resample_mm: float = 0.5
    crop_margin_mm: float = 2.0
    max_iterations: int = 500

    def __post_init__(self):
        if not 0 < self.shell_min_mm < self.shell_max_mm:
            raise ValueError("need 0 < shell_min_mm < shell_max_mm")
        if not 0 < self.step_fraction <= 1:
            raise ValueError("step_fraction must be in (0, 1]")
        positive = (
            self.start_refine_radius_mm,
            self.cone_half_angle_deg,
            self.cone_ray_count,
            self.cone_max_len_mm,
            self.ray_step_mm,
            self.resample_mm,
            self.max_iterations,
        )
        if min(positive) <= 0 or self.crop_margin_mm < 0:
            raise ValueError("radii, counts and resolutions must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class PathPolyline:
    points: np.ndarray  # (N, 3) world mm
    termination: str = NO_CANDIDATES

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("a path needs at least one point")

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    @property
    def length(self) -> float:
        return float(self.segment_lengths.sum())

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    def __len__(self) -> int:
        return len(self.points)

    def as_dict(self) -> dict:
        return {
            "points": np.round(self.points, 6).tolist(),
            "length_mm": round(self.length, 6),
            "termination": self.termination,
        }


@dataclass(eq=False)
class RibCloud:
    """World coordinates of a (preprocessed) rib mask plus lookup structures."""

    grid: LabelVolume
    coords: np.ndarray = field(init=False, repr=False)
    surface: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        fg = self.grid.data > 0
        if not fg.any():
            raise ValueError("empty rib mask")
        self.coords = self.grid.world_coords(np.argwhere(fg))
        self.surface = self.grid.world_coords(np.argwhere(surface_mask(fg)))
        self._tree = cKDTree(self.coords)
        self._surface_tree = cKDTree(self.surface)
        self._inv = np.linalg.inv(self.grid.affine)

    def nearest_voxel(self, p, prefer=None) -> np.ndarray:
        return _pick(_ties(self._tree, self.coords, p), prefer)

    def nearest_surface(self, p, prefer=None) -> np.ndarray:
        return _pick(_ties(self._surface_tree, self.surface, p), prefer)

    def voxel_index(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Rounded voxel indices of world points and whether each lies on the rib."""
        ijk = np.floor(pts @ self._inv[:3, :3].T + self._inv[:3, 3] + 0.5).astype(int)
        inside = np.all((ijk >= 0) & (ijk < np.array(self.grid.dims)), axis=-1)
        hit = np.zeros(inside.shape, dtype=bool)
        sel = ijk[inside]
        hit[inside] = self.grid.data[sel[:, 0], sel[:, 1], sel[:, 2]] > 0
        return ijk, hit


def _ties(tree: cKDTree, pts: np.ndarray, p) -> np.ndarray:
    """All points of ``pts`` at the minimal distance from ``p`` (within TIE_TOL_MM)."""
    p = np.asarray(p, float)
    d_min = tree.query(p)[0]
    idx = tree.query_ball_point(p, d_min + TIE_TOL_MM)
    return pts[np.sort(idx)]


def _pick(ties: np.ndarray, prefer=None) -> np.ndarray:
    """Resolve equidistant voxels geometrically so the choice follows rigid motions of the input.

    Ties go to the voxel closest to ``prefer``; lexicographic order is the last resort.
    """
    if len(ties) > 1 and prefer is not None:
        d = np.linalg.norm(ties - np.asarray(prefer, float), axis=1)
        ties = ties[d <= d.min() + TIE_TOL_MM]
    if len(ties) > 1:
        ties = ties[np.lexsort(ties.T[::-1])]
    return ties[0]


def _cloud(rib) -> RibCloud:
    return rib if isinstance(rib, RibCloud) else RibCloud(rib)


def _points(path) -> np.ndarray:
    return path.points if isinstance(path, PathPolyline) else np.asarray(path, float).reshape(-1, 3)


def prepare_rib(rib: LabelVolume, cfg: RlmaConfig = RlmaConfig()) -> RibCloud:
    """Crop, resample to ``cfg.resample_mm`` isotropic and fill cavities."""
    binary = rib.mask()
    if not binary.data.any():
        raise ValueError("empty rib mask")
    cropped = crop_with_margin(binary, 1, cfg.crop_margin_mm)
    return RibCloud(fill_holes(resample_nearest(cropped, cfg.resample_mm)))


def find_start_point(rib, corpus_center, cfg: RlmaConfig = RlmaConfig()) -> np.ndarray:
    cloud = _cloud(rib)
    center = np.asarray(corpus_center, float)
    # equidistant nearest surface voxels are averaged rather than picked by index order
    anchor = _ties(cloud._surface_tree, cloud.surface, center).mean(axis=0)
    near_idx = cloud._tree.query_ball_point(anchor, cfg.start_refine_radius_mm)
    mean = cloud.coords[np.sort(near_idx)].mean(axis=0)
    return cloud.nearest_surface(mean, prefer=center)


def shell_candidates(rib, path, cfg: RlmaConfig = RlmaConfig()) -> np.ndarray:
    """Rib voxels on the shell around the last point that are not closer to an earlier point."""
    cloud = _cloud(rib)
    pts = _points(path)
    last = pts[-1]
    d_last = np.linalg.norm(cloud.coords - last, axis=1)
    on_shell = (d_last >= cfg.shell_min_mm) & (d_last <= cfg.shell_max_mm)
    cand, d_cand = cloud.coords[on_shell], d_last[on_shell]
    if len(pts) > 1 and len(cand):
        d_prior = cdist(cand, pts[:-1]).min(axis=1)
        keep = ~(d_prior < d_cand)
        cand = cand[keep]
    return cand


def next_path_point(rib, path, cfg: RlmaConfig = RlmaConfig()) -> np.ndarray | None:
    cloud = _cloud(rib)
    pts = _points(path)
    cand = shell_candidates(cloud, pts, cfg)
    if len(cand) == 0:
        return None
    last = pts[-1]
    mean = cand.mean(axis=0)
    target = last + cfg.step_fraction * (mean - last)
    nxt = cloud.nearest_voxel(target, prefer=mean)
    if np.linalg.norm(nxt - last) < 1e-9:
        return None
    return nxt


def cone_directions(axis, half_angle_deg: float, count: int, reference=None) -> np.ndarray:
    """Deterministic golden-angle spiral of unit vectors within a cone around ``axis``.

    Rays come in pairs mirrored across the plane spanned by ``axis`` and
    ``reference`` (the azimuth origin), so the ray set moves with the
    anatomy under rotations and reflections. Without a usable reference the
    azimuth origin falls back to a fixed world axis.
    """
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    u = None
    if reference is not None:
        r = np.asarray(reference, float)
        r = r - r.dot(axis) * axis
        if np.linalg.norm(r) > 1e-6:
            u = r / np.linalg.norm(r)
    if u is None:
        helper = np.eye(3)[np.argmin(np.abs(axis))]
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    n_half = (count + 1) // 2
    j = np.arange(count) // 2
    sign = np.where(np.arange(count) % 2 == 0, 1.0, -1.0)
    cos_max = math.cos(math.radians(half_angle_deg))
    cos_t = 1.0 - (j + 0.5) / n_half * (1.0 - cos_max)
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))
    phi = sign * j * math.pi * (3.0 - math.sqrt(5.0))
    return (
        cos_t[:, None] * axis
        + (sin_t * np.cos(phi))[:, None] * u
        + (sin_t * np.sin(phi))[:, None] * v
    )


def terminal_point(rib, path, cfg: RlmaConfig = RlmaConfig(), corpus_center=None) -> np.ndarray:
    """Farthest rib point reachable along a cone of rays continuing the path.

    For a single-point path the cone points away from ``corpus_center``.
    Equally far hits go to the one nearest the cone axis.
    """
    cloud = _cloud(rib)
    pts = _points(path)
    last = pts[-1]
    anchor = np.asarray(corpus_center, float) if corpus_center is not None else pts[0]
    if len(pts) >= 2:
        axis = last - pts[-2]
    elif corpus_center is not None:
        axis = last - anchor
    else:
        raise ValueError("a one-point path needs corpus_center for the cone direction")
    if np.linalg.norm(axis) < 1e-9:
        return last
    dirs = cone_directions(axis, cfg.cone_half_angle_deg, cfg.cone_ray_count, reference=last - anchor)
    steps = np.arange(1, int(math.floor(cfg.cone_max_len_mm / cfg.ray_step_mm)) + 1) * cfg.ray_step_mm
    samples = last + steps[None, :, None] * dirs[:, None, :]  # (rays, steps, 3)
    ijk, hit = cloud.voxel_index(samples)
    # contiguous run from the start of each ray
    n_run = np.cumprod(hit, axis=1).sum(axis=1)
    ok = n_run > 0
    if not ok.any():
        return last
    rays = np.flatnonzero(ok)
    tips = cloud.grid.world_coords(ijk[rays, n_run[rays] - 1])
    d = np.linalg.norm(tips - last, axis=1)
    keep = (d > 0) & (d <= cfg.cone_max_len_mm)
    if not keep.any():
        return last
    tips, d = tips[keep], d[keep]
    tips = np.unique(tips[d >= d.max() - TIE_TOL_MM], axis=0)
    if len(tips) > 1:
        unit = axis / np.linalg.norm(axis)
        off_axis = np.linalg.norm(np.cross(tips - last, unit), axis=1)
        tips = tips[off_axis <= off_axis.min() + TIE_TOL_MM]
    return _pick(tips)


def measure_rib(rib, corpus_center, cfg: RlmaConfig = RlmaConfig()) -> PathPolyline:
    """Full measurement: preprocess, start point, shell stepping, cone end point.

    ``rib`` is a binary rib volume (preprocessed here) or an already prepared
    :class:`RibCloud`.
    """
    cloud = rib if isinstance(rib, RibCloud) else prepare_rib(rib, cfg)
    points = [find_start_point(cloud, corpus_center, cfg)]
    for _ in range(cfg.max_iterations):
        nxt = next_path_point(cloud, points, cfg)
        if nxt is None:
            break
        points.append(nxt)
    else:
        raise IterationLimitError(PathPolyline(points, MAX_ITERATIONS))
    end = terminal_point(cloud, points, cfg, corpus_center=corpus_center)
    if np.linalg.norm(end - points[-1]) > 1e-9:
        points.append(end)
        return PathPolyline(points, CONE_END)
    return PathPolyline(points, NO_CANDIDATES)


def classify_stump(length_mm: float, threshold_mm: float = STUMP_THRESHOLD_MM) -> bool:
    if length_mm < 0:
        raise ValueError("negative rib length")
    return length_mm <= threshold_mm
