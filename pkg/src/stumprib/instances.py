"""Rib-to-vertebra instance assignment and the vertebra-local anatomic frame."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .morphology import ComponentSet, centroid, connected_components, surface_mask
from .volume import LabelVolume

LEFT, RIGHT = "L", "R"
ORPHAN_LABEL_START = 200
MAX_VERTEBRA_LABEL = 99


class DegenerateFrameWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class VertebraInstance:
    label: int
    centroid: np.ndarray
    corpus_centroid: np.ndarray
    frame: np.ndarray  # columns: Right, Anterior, Superior
    surface_points: np.ndarray = field(repr=False)
    frame_fallback: bool = False


@dataclass
class RibInstance:
    component: int
    voxel_count: int
    volume_mm3: float
    centroid: np.ndarray
    surface_points: np.ndarray = field(repr=False)
    vertebra: int | None = None
    side: str | None = None
    orphan_label: int | None = None

    @property
    def label(self) -> int:
        """Output label: ``2 * vertebra + (1 for right)``, or the reserved orphan label."""
        if self.vertebra is None:
            return self.orphan_label
        return 2 * self.vertebra + (1 if self.side == RIGHT else 0)

    @property
    def anatomic_label(self) -> str | None:
        return None if self.vertebra is None else f"{self.vertebra}{self.side}"

    def as_dict(self) -> dict:
        return {
            "rib_label": self.label,
            "component": self.component,
            "vertebra": self.vertebra,
            "side": self.side,
            "voxel_count": self.voxel_count,
            "volume_mm3": round(self.volume_mm3, 6),
            "orphan": self.vertebra is None,
        }


@dataclass
class AssignmentTable:
    ribs: list[RibInstance]
    orphans: list[int]  # reserved labels handed to unassigned ribs

    def assigned(self) -> list[RibInstance]:
        return [r for r in self.ribs if r.vertebra is not None]

    def by_slot(self) -> dict[tuple[int, str], RibInstance]:
        return {(r.vertebra, r.side): r for r in self.assigned()}

    def relabel(self, components: ComponentSet) -> LabelVolume:
        """Instance label volume with each rib carrying its output label."""
        lut = np.zeros(components.count + 1, dtype=np.int32)
        for rib in self.ribs:
            lut[rib.component] = rib.label
        return components.labeled.with_data(lut[components.labeled.data])

    def as_records(self) -> list[dict]:
        return [r.as_dict() for r in sorted(self.ribs, key=lambda r: r.label)]


def corpus_center(vertebra_mask: LabelVolume, corpus_mask: LabelVolume | None = None) -> np.ndarray:
    """Vertebral body center.

    Without a corpus mask this falls back to the centroid of the voxels whose
    world anterior coordinate is at or above the mask's median, which is only
    an approximation of the body.
    """
    if corpus_mask is not None:
        return centroid(corpus_mask)
    idx = np.argwhere(vertebra_mask.data > 0)
    if len(idx) == 0:
        raise ValueError("empty vertebra mask")
    pts = vertebra_mask.world_coords(idx)
    anterior = pts[:, 1]
    return pts[anterior >= np.median(anterior)].mean(axis=0)


def vertebra_frame(vertebra: LabelVolume, corpus_center_pt, superior_hint=None) -> np.ndarray:
    """Rotation whose columns are the vertebra's Right, Anterior and Superior axes."""
    superior = np.array([0.0, 0.0, 1.0]) if superior_hint is None else np.asarray(superior_hint, float)
    superior = superior / np.linalg.norm(superior)
    offset = np.asarray(corpus_center_pt, float) - centroid(vertebra)
    anterior = offset - offset.dot(superior) * superior
    norm = np.linalg.norm(anterior)
    if norm < 1e-6:
        warnings.warn(
            "corpus center does not define an anterior direction; using world axes",
            DegenerateFrameWarning,
            stacklevel=2,
        )
        return np.eye(3)
    anterior /= norm
    right = np.cross(anterior, superior)
    right /= np.linalg.norm(right)
    return np.column_stack([right, anterior, superior])


def build_vertebrae(
    vertebrae: LabelVolume, corpus: LabelVolume | None = None, superior_hint=None
) -> list[VertebraInstance]:
    """One :class:`VertebraInstance` per label of the vertebra instance mask.

    ``corpus`` may carry vertebra labels (matched per label) or be binary
    (intersected with each vertebra).
    """
    out = []
    corpus_labels = set(corpus.labels()) if corpus is not None else set()
    for label in vertebrae.labels():
        if label > MAX_VERTEBRA_LABEL:
            raise ValueError(f"vertebra label {label} exceeds {MAX_VERTEBRA_LABEL}")
        vmask = vertebrae.mask(label)
        cmask = None
        if corpus is not None:
            if label in corpus_labels:
                cmask = corpus.mask(label)
            else:
                sel = (corpus.data > 0) & (vertebrae.data == label)
                cmask = corpus.with_data(sel.astype(np.uint8)) if sel.any() else None
        center = corpus_center(vmask, cmask)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateFrameWarning)
            frame = vertebra_frame(vmask, center, superior_hint)
        fallback = any(issubclass(w.category, DegenerateFrameWarning) for w in caught)
        surf = vertebrae.world_coords(np.argwhere(surface_mask(vmask)))
        out.append(VertebraInstance(label, centroid(vmask), center, frame, surf, fallback))
    return out


def rib_instances(components: ComponentSet) -> list[RibInstance]:
    vol = components.labeled
    ribs = []
    for label in range(1, components.count + 1):
        m = vol.data == label
        idx = np.argwhere(m)
        surf = vol.world_coords(np.argwhere(surface_mask(m)))
        ribs.append(
            RibInstance(
                component=label,
                voxel_count=len(idx),
                volume_mm3=len(idx) * vol.voxel_volume,
                centroid=vol.world_coords(idx.mean(axis=0))[0],
                surface_points=surf,
            )
        )
    return ribs


def determine_side(rib: RibInstance, vertebra: VertebraInstance) -> str:
    lateral = (np.asarray(rib.centroid) - vertebra.centroid) @ vertebra.frame[:, 0]
    if abs(lateral) < 1e-6:
        raise ValueError(f"rib component {rib.component} lies on the midline of vertebra {vertebra.label}")
    return RIGHT if lateral > 0 else LEFT


def surface_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Minimal Euclidean distance between two world point sets."""
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    d, _ = cKDTree(b).query(a, k=1)
    return float(d.min())


def assign_ribs(ribs: list[RibInstance] | ComponentSet, vertebrae: list[VertebraInstance]) -> AssignmentTable:
    """Greedy nearest-first assignment, at most one rib per vertebra side."""
    if isinstance(ribs, ComponentSet):
        ribs = rib_instances(ribs)
    if not ribs:
        raise ValueError("no rib components to assign")
    pairs = []
    for ri, rib in enumerate(ribs):
        for vi, vert in enumerate(vertebrae):
            pairs.append((surface_distance(rib.surface_points, vert.surface_points), ri, vi))
    pairs.sort()
    taken: set[tuple[int, str]] = set()
    for _, ri, vi in pairs:
        rib, vert = ribs[ri], vertebrae[vi]
        if rib.vertebra is not None:
            continue
        side = determine_side(rib, vert)
        if (vert.label, side) in taken:
            continue
        taken.add((vert.label, side))
        rib.vertebra, rib.side = vert.label, side
    orphans = []
    for rib in ribs:
        if rib.vertebra is None:
            rib.orphan_label = ORPHAN_LABEL_START + len(orphans)
            orphans.append(rib.orphan_label)
    return AssignmentTable(ribs, orphans)


def assign_scene(
    rib_mask: LabelVolume, vertebrae: LabelVolume, corpus: LabelVolume | None = None
) -> tuple[AssignmentTable, ComponentSet, list[VertebraInstance]]:
    components = connected_components(rib_mask, connectivity=26)
    verts = build_vertebrae(vertebrae, corpus)
    if components.count == 0:
        return AssignmentTable([], []), components, verts
    return assign_ribs(components, verts), components, verts
