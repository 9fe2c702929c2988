"""Segmentation metrics: Dice, ASSD and panoptic (RQ/SQ/PQ) instance scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .morphology import surface_mask
from .volume import LabelVolume

MATCH_THRESHOLD = 0.5


class GridMismatchError(ValueError):
    pass


def _check_grid(x: LabelVolume, y: LabelVolume) -> None:
    if not x.same_grid(y):
        raise GridMismatchError(f"volumes are on different grids: {x.dims} vs {y.dims}")


def _dice_arrays(a: np.ndarray, b: np.ndarray) -> float:
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def dice(x: LabelVolume, y: LabelVolume) -> float:
    _check_grid(x, y)
    return _dice_arrays(x.data > 0, y.data > 0)


def _assd_arrays(a: np.ndarray, b: np.ndarray, vol: LabelVolume) -> float:
    if not a.any() or not b.any():
        raise ValueError("ASSD is undefined for an empty mask")
    pa = vol.world_coords(np.argwhere(surface_mask(a)))
    pb = vol.world_coords(np.argwhere(surface_mask(b)))
    d_ab = cKDTree(pb).query(pa)[0].sum()
    d_ba = cKDTree(pa).query(pb)[0].sum()
    return float((d_ab + d_ba) / (len(pa) + len(pb)))


def assd(x: LabelVolume, y: LabelVolume) -> float:
    """Average symmetric surface distance (mm) between the masks' boundary voxels."""
    _check_grid(x, y)
    return _assd_arrays(x.data > 0, y.data > 0, x)


@dataclass
class InstanceMatching:
    pairs: list[tuple[int, int, float]]  # (reference label, prediction label, dice)
    fp: int
    fn: int
    unmatched_pred: list[int] = field(default_factory=list)
    unmatched_ref: list[int] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.pairs)


def _overlap_table(pred: np.ndarray, ref: np.ndarray):
    p_labels, p_sizes = np.unique(pred[pred > 0], return_counts=True)
    r_labels, r_sizes = np.unique(ref[ref > 0], return_counts=True)
    both = (pred > 0) & (ref > 0)
    if not both.any():
        return dict(zip(p_labels.tolist(), p_sizes.tolist())), dict(zip(r_labels.tolist(), r_sizes.tolist())), [], []
    keys, inter = np.unique(np.stack([ref[both], pred[both]]), axis=1, return_counts=True)
    return dict(zip(p_labels.tolist(), p_sizes.tolist())), dict(zip(r_labels.tolist(), r_sizes.tolist())), keys.T, inter


def match_instances(pred: LabelVolume, ref: LabelVolume, threshold: float = MATCH_THRESHOLD) -> InstanceMatching:
    """One-to-one matching of overlapping instances with Dice >= ``threshold``, best pairs first."""
    _check_grid(pred, ref)
    p_sizes, r_sizes, keys, inter = _overlap_table(pred.data, ref.data)
    candidates = []
    for (r, p), n in zip(np.asarray(keys).tolist(), np.asarray(inter).tolist()):
        d = 2.0 * n / (r_sizes[r] + p_sizes[p])
        if d >= threshold:
            candidates.append((-d, r, p))
    candidates.sort()
    used_r, used_p, pairs = set(), set(), []
    for neg_d, r, p in candidates:
        if r in used_r or p in used_p:
            continue
        used_r.add(r)
        used_p.add(p)
        pairs.append((r, p, -neg_d))
    unmatched_pred = sorted(set(p_sizes) - used_p)
    unmatched_ref = sorted(set(r_sizes) - used_r)
    return InstanceMatching(pairs, len(unmatched_pred), len(unmatched_ref), unmatched_pred, unmatched_ref)


def recognition_quality(tp: int, fp: int, fn: int) -> float:
    denom = tp + 0.5 * (fp + fn)
    return tp / denom if denom > 0 else 0.0


def panoptic(matching: InstanceMatching, values) -> tuple[float, float | None, float | None]:
    """(RQ, SQ, PQ) for per-pair metric ``values`` aligned with ``matching.pairs``.

    SQ and PQ are None when nothing matched; callers decide how to report that
    (0 for Dice-like scores, absent for distances).
    """
    rq = recognition_quality(matching.tp, matching.fp, matching.fn)
    values = list(values)
    if len(values) != matching.tp:
        raise ValueError("one metric value per matched pair required")
    if not values:
        return rq, None, None
    sq = float(sum(values) / len(values))
    return rq, sq, sq * rq


@dataclass
class PanopticReport:
    binary_dsc: float
    rq: float
    sq: dict[str, float | None]
    pq: dict[str, float | None]
    matching: InstanceMatching

    @property
    def tp(self) -> int:
        return self.matching.tp

    def as_dict(self) -> dict:
        return {
            "schema_version": 1,
            "binary_dsc": self.binary_dsc,
            "rq": self.rq,
            "sq_dsc": self.sq["dsc"],
            "pq_dsc": self.pq["dsc"],
            "sq_assd": self.sq["assd"],
            "pq_assd": self.pq["assd"],
            "tp": self.matching.tp,
            "fp": self.matching.fp,
            "fn": self.matching.fn,
            "pairs": [{"ref": r, "pred": p, "dsc": d} for r, p, d in self.matching.pairs],
        }


def evaluate(pred: LabelVolume, ref: LabelVolume) -> PanopticReport:
    _check_grid(pred, ref)
    matching = match_instances(pred, ref)
    dscs = [d for _, _, d in matching.pairs]
    assds = [_assd_arrays(ref.data == r, pred.data == p, ref) for r, p, _ in matching.pairs]
    rq, sq_d, pq_d = panoptic(matching, dscs)
    _, sq_a, pq_a = panoptic(matching, assds)
    if sq_d is None:
        sq_d, pq_d = 0.0, 0.0
    return PanopticReport(
        binary_dsc=dice(pred, ref),
        rq=rq,
        sq={"dsc": sq_d, "assd": sq_a},
        pq={"dsc": pq_d, "assd": pq_a},
        matching=matching,
    )


REPORT_METRICS = ("binary_dsc", "rq", "sq_dsc", "pq_dsc", "sq_assd")


def aggregate(reports) -> dict[str, tuple[float, float, int]]:
    """Mean, population std and count per metric over subjects (absent values skipped)."""
    out = {}
    for key in REPORT_METRICS:
        vals = [r.as_dict()[key] for r in reports]
        vals = [v for v in vals if v is not None and not math.isnan(v)]
        if vals:
            out[key] = (float(np.mean(vals)), float(np.std(vals)), len(vals))
        else:
            out[key] = (float("nan"), float("nan"), 0)
    return out
