"""Synthetic voxel scenes and feature cohorts with known ground truth.

Tubes follow curves with closed-form arc length (lines, circular arcs,
helices) and have flat end faces, so a tube's centerline length is exactly
the curve length. Scenes stack simple vertebra blobs along the superior
axis with one rib per side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import LabelVolume

LINE, ARC, HELIX = "line", "circular_arc", "helix"


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class CurveSpec:
    kind: str
    start: tuple = (0.0, 0.0, 0.0)  # line/arc start, helix axis base point
    end: tuple | None = None  # line only
    tangent: tuple | None = None  # arc: initial direction
    normal: tuple | None = None  # arc: bending direction; helix: axis
    radius: float = 0.0  # arc/helix radius
    angle_deg: float = 0.0  # arc span
    pitch: float = 0.0  # helix rise per turn
    turns: float = 0.0
    tube_radius: float = 4.0
    spacing: float = 0.5

    def __post_init__(self):
        if self.kind not in (LINE, ARC, HELIX):
            raise ValueError(f"unknown curve kind {self.kind!r}")
        if self.tube_radius < 2 * self.spacing - 1e-9:
            raise ValueError("tube_radius must be at least twice the spacing")

    @classmethod
    def line(cls, start, end, tube_radius=4.0, spacing=0.5) -> CurveSpec:
        return cls(LINE, tuple(map(float, start)), tuple(map(float, end)), tube_radius=tube_radius, spacing=spacing)

    @classmethod
    def arc(cls, start, tangent, normal, radius, angle_deg, tube_radius=4.0, spacing=0.5) -> CurveSpec:
        t = _unit(tangent)
        n = np.asarray(normal, float)
        n = _unit(n - n.dot(t) * t)
        return cls(
            ARC,
            tuple(map(float, start)),
            tangent=tuple(t),
            normal=tuple(n),
            radius=float(radius),
            angle_deg=float(angle_deg),
            tube_radius=tube_radius,
            spacing=spacing,
        )

    @classmethod
    def helix(cls, center, radius, pitch, turns, axis=(0, 0, 1), tube_radius=4.0, spacing=0.5) -> CurveSpec:
        return cls(
            HELIX,
            tuple(map(float, center)),
            normal=tuple(_unit(axis)),
            radius=float(radius),
            pitch=float(pitch),
            turns=float(turns),
            tube_radius=tube_radius,
            spacing=spacing,
        )

    def point_at(self, s: np.ndarray) -> np.ndarray:
        """Curve points at arc-length parameters ``s`` (mm)."""
        s = np.atleast_1d(np.asarray(s, float))[:, None]
        p0 = np.asarray(self.start, float)
        if self.kind == LINE:
            length = analytic_length(self)
            if length == 0:
                return np.repeat(p0[None], len(s), axis=0)
            return p0 + s * (np.asarray(self.end) - p0) / length
        if self.kind == ARC:
            t, n, r = np.asarray(self.tangent), np.asarray(self.normal), self.radius
            phi = s / r
            return p0 + r * np.sin(phi) * t + r * (1 - np.cos(phi)) * n
        axis = np.asarray(self.normal)
        helper = np.eye(3)[np.argmin(np.abs(axis))]
        u = _unit(np.cross(axis, helper))
        v = np.cross(axis, u)
        per_turn = math.hypot(2 * math.pi * self.radius, self.pitch)
        theta = 2 * math.pi * s / per_turn
        rise = self.pitch * s / per_turn
        return p0 + self.radius * (np.cos(theta) * u + np.sin(theta) * v) + rise * axis

    def sample(self, step: float) -> np.ndarray:
        length = analytic_length(self)
        n = max(1, int(math.ceil(length / step)))
        return self.point_at(np.linspace(0.0, length, n + 1))


def analytic_length(curve: CurveSpec) -> float:
    if curve.kind == LINE:
        return float(np.linalg.norm(np.asarray(curve.end, float) - np.asarray(curve.start, float)))
    if curve.kind == ARC:
        return curve.radius * math.radians(curve.angle_deg)
    return curve.turns * math.hypot(2 * math.pi * curve.radius, curve.pitch)


def voxelize_tube(curve: CurveSpec, grid: LabelVolume) -> LabelVolume:
    """Binary mask of voxels whose center lies within ``tube_radius`` of the curve.

    Distances are taken to curve samples spaced ``spacing / 4``; voxels past
    either end of the curve (beyond the end-face plane) are excluded, except
    for a zero-length curve, which yields a ball.
    """
    step = curve.spacing / 4
    samples = curve.sample(step)
    r = curve.tube_radius
    inv = np.linalg.inv(grid.affine)
    lo_w, hi_w = samples.min(axis=0) - r, samples.max(axis=0) + r
    corners = np.array([[x, y, z] for x in (lo_w[0], hi_w[0]) for y in (lo_w[1], hi_w[1]) for z in (lo_w[2], hi_w[2])])
    cidx = corners @ inv[:3, :3].T + inv[:3, 3]
    lo = np.floor(cidx.min(axis=0)).astype(int)
    hi = np.ceil(cidx.max(axis=0)).astype(int)
    dims = np.array(grid.dims)
    if np.any(lo < 1) or np.any(hi > dims - 2):
        raise ValueError("tube does not fit in the grid with a one-voxel margin")
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = grid.world_coords(idx)
    dist, nearest = cKDTree(samples).query(pts, distance_upper_bound=r + step)
    inside = dist <= r
    if len(samples) > 1 and analytic_length(curve) > 0:
        t0 = _unit(samples[1] - samples[0])
        t1 = _unit(samples[-1] - samples[-2])
        past_start = (nearest == 0) & (((pts - samples[0]) @ t0) < -1e-9)
        past_end = (nearest == len(samples) - 1) & (((pts - samples[-1]) @ t1) > 1e-9)
        inside &= ~(past_start | past_end)
    data = np.zeros(grid.dims, dtype=np.uint8)
    sel = idx[inside]
    data[sel[:, 0], sel[:, 1], sel[:, 2]] = 1
    return grid.with_data(data)


def grid_around(points, margin_mm: float, spacing: float) -> LabelVolume:
    """Empty axis-aligned grid covering ``points`` plus ``margin_mm``.

    The origin snaps to a multiple of ``spacing`` so that the world origin
    falls on a voxel center and symmetric shapes voxelize symmetrically.
    """
    points = np.asarray(points, float).reshape(-1, 3)
    lo = np.floor((points.min(axis=0) - margin_mm) / spacing) * spacing
    hi = points.max(axis=0) + margin_mm
    dims = np.ceil((hi - lo) / spacing).astype(int) + 1
    return LabelVolume.from_spacing(np.zeros(dims, np.uint8), (spacing,) * 3, origin=lo)


def tube_phantom(curve: CurveSpec, margin_mm: float = 3.0) -> LabelVolume:
    """A tube voxelized on its own snug grid at ``curve.spacing``."""
    samples = curve.sample(curve.spacing)
    grid = grid_around(samples, curve.tube_radius + margin_mm, curve.spacing)
    return voxelize_tube(curve, grid)


# --- scenes ------------------------------------------------------------------

VERTEBRA_PITCH_MM = 34.0
CORPUS_RADIUS_MM = 14.0
CORPUS_HALF_HEIGHT_MM = 10.0
ARCH_HALF_WIDTH_MM = 7.0
ARCH_Y_RANGE_MM = (-34.0, -12.0)
ARCH_HALF_HEIGHT_MM = 7.0
REGULAR_RIB = {"start": (16.0, -16.0), "direction": (0.68, -0.64, -0.15), "radius": 4.0, "length": 150.0}
STUMP_RIB = {"start": (16.0, -20.0), "direction": (0.81, -0.39, -0.32), "radius": 3.0}
RIB_BEND_RADIUS_MM = 80.0


@dataclass
class RibTruth:
    label: int
    vertebra: int
    side: str
    length_mm: float
    start: np.ndarray
    tube_radius: float
    is_stump: bool
    curve: CurveSpec = field(repr=False)

    def as_dict(self) -> dict:
        return {
            "rib_label": self.label,
            "vertebra": self.vertebra,
            "side": self.side,
            "length_mm": round(self.length_mm, 6),
            "start": np.round(self.start, 6).tolist(),
            "tube_radius_mm": self.tube_radius,
            "is_stump": self.is_stump,
        }


@dataclass
class VertebraTruth:
    label: int
    corpus_center: np.ndarray
    frame: np.ndarray

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "corpus_center": np.round(self.corpus_center, 6).tolist(),
            "frame": np.round(self.frame, 9).tolist(),
        }


@dataclass
class PhantomScene:
    ribs: LabelVolume  # rib instances labelled 2 * vertebra + (1 if right)
    vertebrae: LabelVolume
    corpus: LabelVolume  # corpus voxels carrying their vertebra label
    rib_truth: list[RibTruth]
    vertebra_truth: list[VertebraTruth]

    @property
    def rib_mask(self) -> LabelVolume:
        return self.ribs.mask()

    def ground_truth(self) -> dict:
        return {
            "schema_version": 1,
            "ribs": [r.as_dict() for r in self.rib_truth],
            "vertebrae": [v.as_dict() for v in self.vertebra_truth],
        }


def _rib_curve(center_z: float, side: str, stump_length: float | None, spacing: float) -> CurveSpec:
    sgn = 1.0 if side == "R" else -1.0
    proto = REGULAR_RIB if stump_length is None else STUMP_RIB
    length = REGULAR_RIB["length"] if stump_length is None else stump_length
    x, y = proto["start"]
    d = np.array(proto["direction"], float)
    d[0] *= sgn
    bend = np.array([sgn * 0.3, 1.0, 0.0])
    angle = math.degrees(length / RIB_BEND_RADIUS_MM)
    return CurveSpec.arc(
        (sgn * x, y, center_z), d, bend, RIB_BEND_RADIUS_MM, angle, tube_radius=proto["radius"], spacing=spacing
    )


def _vertebra_masks(grid: LabelVolume, center_z: float) -> tuple[np.ndarray, np.ndarray]:
    # grid_around() grids are axis aligned
    sp, origin = np.diag(grid.affine)[:3], grid.affine[:3, 3]
    x, y, z = (origin[a] + sp[a] * np.arange(n) for a, n in enumerate(grid.dims))
    x, y, z = x[:, None, None], y[None, :, None], z[None, None, :] - center_z
    corpus = (x**2 + y**2 <= CORPUS_RADIUS_MM**2) & (np.abs(z) <= CORPUS_HALF_HEIGHT_MM)
    arch = (
        (np.abs(x) <= ARCH_HALF_WIDTH_MM)
        & (y >= ARCH_Y_RANGE_MM[0])
        & (y <= ARCH_Y_RANGE_MM[1])
        & (np.abs(z) <= ARCH_HALF_HEIGHT_MM)
    )
    return corpus | arch, corpus


def build_scene(
    n_vertebrae: int = 2,
    ribs_per_side: int = 1,
    stump_lengths=None,
    spacing: float = 1.0,
    first_label: int = 18,
) -> PhantomScene:
    """Vertebrae stacked from superior to inferior, labels increasing caudally.

    ``stump_lengths`` lists truncated lengths (mm, or None for a regular rib)
    for the lowest vertebra's ribs in the order (right, left).
    """
    if n_vertebrae < 1:
        raise ValueError("need at least one vertebra")
    if ribs_per_side not in (0, 1):
        raise ValueError("a vertebra carries at most one rib per side")
    stump_lengths = list(stump_lengths or [])
    if len(stump_lengths) > 2 * ribs_per_side:
        raise ValueError("more stump lengths than ribs on the lowest vertebra")
    labels = [first_label + i for i in range(n_vertebrae)]
    centers = [-i * VERTEBRA_PITCH_MM for i in range(n_vertebrae)]

    curves = []
    for i, (label, zc) in enumerate(zip(labels, centers)):
        for s_i, side in enumerate(("R", "L")[: 2 * ribs_per_side]):
            stump = stump_lengths[s_i] if i == n_vertebrae - 1 and s_i < len(stump_lengths) else None
            curves.append((label, side, _rib_curve(zc, side, stump, spacing), stump is not None))

    extent = [c.sample(spacing) for _, _, c, _ in curves]
    reach = CORPUS_RADIUS_MM + 5
    extent.append(np.array([[-reach, ARCH_Y_RANGE_MM[0] - 5, centers[-1] - reach], [reach, reach, centers[0] + reach]]))
    grid = grid_around(np.vstack(extent), margin_mm=8.0, spacing=spacing)

    ribs = np.zeros(grid.dims, np.int32)
    verts = np.zeros(grid.dims, np.int32)
    corpus = np.zeros(grid.dims, np.int32)
    vertebra_truth = []
    for label, zc in zip(labels, centers):
        vmask, cmask = _vertebra_masks(grid, zc)
        if np.any(verts[vmask]):
            raise ValueError("vertebrae overlap")
        verts[vmask] = label
        corpus[cmask] = label
        vertebra_truth.append(VertebraTruth(label, np.array([0.0, 0.0, zc]), np.eye(3)))

    rib_truth = []
    for label, side, curve, is_stump in curves:
        m = voxelize_tube(curve, grid).data > 0
        if np.any(ribs[m]) or np.any(verts[m]):
            raise ValueError(f"rib {label}{side} overlaps another structure")
        rib_label = 2 * label + (1 if side == "R" else 0)
        ribs[m] = rib_label
        rib_truth.append(
            RibTruth(rib_label, label, side, analytic_length(curve), np.array(curve.start), curve.tube_radius, is_stump, curve)
        )

    _, n_parts = ndimage.label((ribs > 0) | (verts > 0), structure=np.ones((3, 3, 3)))
    if n_parts != len(rib_truth) + n_vertebrae:
        raise ValueError("generated structures touch; scene would be ambiguous")
    return PhantomScene(grid.with_data(ribs), grid.with_data(verts), grid.with_data(corpus), rib_truth, vertebra_truth)


def _index_transform(shape, op) -> np.ndarray:
    """Affine map (4x4) from new voxel indices to old ones for an array operation ``op``."""
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    moved = [op(g) for g in grids]
    probe = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]
    old = np.array([[m[p] for m in moved] for p in probe], float)
    m = np.eye(4)
    m[:3, 3] = old[0]
    for ax in range(3):
        m[:3, ax] = old[ax + 1] - old[0]
    return m


def transform_scene(scene: PhantomScene, quarter_turns: int = 0, mirror: bool = False) -> PhantomScene:
    """Rotate the scene by quarter turns about the superior axis and/or mirror left-right.

    Voxel arrays are permuted in place of resampling, so the transform is
    exact; the affine is kept, which moves the anatomy in world space.
    """

    def op(a):
        if mirror:
            a = np.flip(a, axis=0)
        return np.rot90(a, k=quarter_turns, axes=(0, 1))

    shape = scene.ribs.dims
    new_to_old = _index_transform(shape, op)
    new_shape = op(np.zeros(shape)).shape
    aff = scene.ribs.affine
    # world_old -> world_new
    world = aff @ np.linalg.inv(new_to_old) @ np.linalg.inv(aff)
    lin, shift = world[:3, :3], world[:3, 3]

    def vol(v):
        return LabelVolume(op(v.data), aff)

    def relabel(data):
        if not mirror:
            return data
        out = data.copy()
        fg = data > 0
        out[fg] = data[fg] ^ 1  # swap the side bit
        return out

    rib_truth = []
    for r in scene.rib_truth:
        side = {"R": "L", "L": "R"}[r.side] if mirror else r.side
        rib_truth.append(replace(r, label=r.label ^ 1 if mirror else r.label, side=side, start=lin @ r.start + shift))
    vertebra_truth = []
    for v in scene.vertebra_truth:
        a, s = lin @ v.frame[:, 1], lin @ v.frame[:, 2]
        vertebra_truth.append(VertebraTruth(v.label, lin @ v.corpus_center + shift, np.column_stack([np.cross(a, s), a, s])))
    assert new_shape == op(scene.ribs.data).shape
    ribs = LabelVolume(relabel(op(scene.ribs.data)), aff)
    return PhantomScene(ribs, vol(scene.vertebrae), vol(scene.corpus), rib_truth, vertebra_truth)


# --- feature-level cohorts -----------------------------------------------------

# (mean, std) per class: stump, regular. Directions are (right, posterior, inferior).
COHORT_STATS = {
    "pdrc": ((-19.2, 3.8), (-13.8, 2.5)),
    "vol_len_ratio": ((260.6, 103.4), (563.6, 127.1)),
    "dir_right": ((0.81, 0.11), (0.68, 0.11)),
    "dir_posterior": ((0.39, 0.17), (0.64, 0.13)),
    "dir_inferior": ((0.32, 0.23), (0.15, 0.30)),
}
STEP_MM = 7.5
TURN_DEG_PER_MM = 0.06
MAX_PATH_DIRS = 4


def _rotate_about_superior(v: np.ndarray, deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]])


def sample_feature_cohort(
    n_stump: int,
    n_regular: int,
    seed: int = 0,
    ribs_per_subject: int = 4,
    noise_scale: float = 1.0,
    length_modes: tuple[float, float] | None = None,
    identical_classes: bool = False,
):
    """Feature records drawn from the published per-class feature distributions.

    Class-level features (PDRC, volume-to-length ratio, first path direction)
    follow per-class normals whose spreads are multiplied by ``noise_scale``.
    Subsequent path directions turn towards anterior by an angle growing with
    rib length, so later path points carry extra signal. ``length_modes``
    replaces the default length distributions by narrow modes (stump,
    regular). With ``identical_classes`` every rib uses the regular-rib
    distributions while keeping its label.
    """
    from .features import RibFeatureRecord

    rng = np.random.default_rng(seed)
    labels = np.array([True] * n_stump + [False] * n_regular)
    rng.shuffle(labels)

    def draw(key, stump):
        mean, std = COHORT_STATS[key][0 if stump else 1]
        return rng.normal(mean, std * noise_scale)

    records = []
    for i, is_stump in enumerate(labels):
        morph = bool(is_stump) and not identical_classes
        if length_modes is not None:
            mode = length_modes[0] if is_stump else length_modes[1]
            length = rng.normal(mode, 0.05 * mode)
        elif is_stump:
            length = rng.normal(30.0, 4.0)
        else:
            length = rng.normal(150.0, 30.0)
        length = float(max(length, 3 * STEP_MM + 0.5))
        if length_modes is None:
            length = min(length, 38.0) if is_stump else max(length, 38.5)
        length_for_turn = 150.0 if identical_classes else length
        drc = np.array([rng.normal(17.0, 2.0 * noise_scale), draw("pdrc", morph), rng.normal(0.0, 2.0 * noise_scale)])
        d = np.array([draw("dir_right", morph), -draw("dir_posterior", morph), -draw("dir_inferior", morph)])
        d = _unit(d)
        dirs = [d]
        for _ in range(MAX_PATH_DIRS - 1):
            turn = TURN_DEG_PER_MM * length_for_turn + rng.normal(0.0, 3.0 * noise_scale)
            d = _unit(_rotate_about_superior(d, turn) + rng.normal(0.0, 0.03 * noise_scale, 3))
            dirs.append(d)
        ratio = max(draw("vol_len_ratio", morph), 10.0)
        records.append(
            RibFeatureRecord(
                subject_id=f"S{i // ribs_per_subject:04d}",
                rib_label=f"{i % ribs_per_subject}",
                side="R" if i % 2 == 0 else "L",
                length_mm=length,
                is_stump=bool(is_stump) if length_modes is None else length <= 38.0,
                drc=drc,
                ppr=np.array(dirs),
                volume_length_ratio=float(ratio),
                volume_mm3=float(ratio * length),
            )
        )
    return records

