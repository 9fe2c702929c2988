"""Per-subject analysis: instance assignment, rib measurement and feature extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .features import RibFeatureRecord, rib_features
from .instances import AssignmentTable, VertebraInstance, assign_scene
from .metrics import GridMismatchError
from .rlma import IterationLimitError, PathPolyline, RlmaConfig, STUMP_THRESHOLD_MM, measure_rib
from .stats import wilcoxon_rank_sum
from .volume import LabelVolume

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class RibResult:
    rib_label: int
    vertebra: int | None
    side: str | None
    volume_mm3: float
    path: PathPolyline | None = None
    is_stump: bool | None = None
    features: RibFeatureRecord | None = None
    error: str | None = None

    def as_dict(self, cfg: RlmaConfig) -> dict:
        out = {
            "rib_label": self.rib_label,
            "vertebra": self.vertebra,
            "side": self.side,
            "volume_mm3": round(self.volume_mm3, 6),
            "orphan": self.vertebra is None,
            "error": self.error,
        }
        if self.path is not None:
            out["path"] = self.path.as_dict()
            out["length_mm"] = round(self.path.length, 6)
            out["is_stump"] = self.is_stump
            out["rlma_config"] = cfg.as_dict()
        if self.features is not None:
            f = self.features
            out["features"] = {
                "drc": np.round(f.drc, 6).tolist(),
                "pdrc": round(f.pdrc, 6),
                "ppr": np.round(f.ppr, 6).tolist(),
                "vol_len_ratio": round(f.volume_length_ratio, 6),
            }
        return out


@dataclass
class SubjectResult:
    subject_id: str
    assignment: AssignmentTable
    vertebrae: list[VertebraInstance]
    ribs: list[RibResult] = field(default_factory=list)
    threshold_mm: float = STUMP_THRESHOLD_MM
    cfg: RlmaConfig = field(default_factory=RlmaConfig)

    @property
    def records(self) -> list[RibFeatureRecord]:
        return [r.features for r in self.ribs if r.features is not None]

    def as_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "subject_id": self.subject_id,
            "stump_threshold_mm": self.threshold_mm,
            "n_ribs": len(self.ribs),
            "message": None if self.ribs else "no ribs found",
            "assignments": self.assignment.as_records(),
            "orphan_labels": self.assignment.orphans,
            "vertebrae": [
                {
                    "label": v.label,
                    "centroid": np.round(v.centroid, 6).tolist(),
                    "corpus_center": np.round(v.corpus_centroid, 6).tolist(),
                    "frame": np.round(v.frame, 9).tolist(),
                    "frame_fallback": v.frame_fallback,
                }
                for v in self.vertebrae
            ],
            "ribs": [r.as_dict(self.cfg) for r in sorted(self.ribs, key=lambda r: r.rib_label)],
        }


def check_alignment(a: LabelVolume, b: LabelVolume, what: str, atol: float = 1e-3) -> None:
    if not a.same_grid(b, atol=atol):
        raise GridMismatchError(f"{what}: grids differ (dims {a.dims} vs {b.dims} or affines beyond {atol} mm)")


def lowest_levels(vertebrae: list[VertebraInstance], labels, count: int = 2) -> list[int]:
    """The ``count`` most inferior vertebra labels among ``labels``, along the mean superior axis."""
    by_label = {v.label: v for v in vertebrae}
    labels = [lab for lab in set(labels) if lab in by_label]
    if not labels:
        return []
    superior = np.mean([by_label[lab].frame[:, 2] for lab in labels], axis=0)
    labels.sort(key=lambda lab: float(by_label[lab].centroid @ superior))
    return labels[:count]


def analyze_subject(
    rib_mask: LabelVolume,
    vertebrae: LabelVolume,
    corpus: LabelVolume | None = None,
    subject_id: str = "subject",
    cfg: RlmaConfig = RlmaConfig(),
    threshold_mm: float = STUMP_THRESHOLD_MM,
    lowest_two: bool = False,
) -> SubjectResult:
    check_alignment(rib_mask, vertebrae, "rib vs vertebra mask")
    if corpus is not None:
        check_alignment(corpus, vertebrae, "corpus vs vertebra mask")
    table, components, verts = assign_scene(rib_mask, vertebrae, corpus)
    result = SubjectResult(subject_id, table, verts, threshold_mm=threshold_mm, cfg=cfg)
    if components.count == 0:
        log.info("%s: no ribs found", subject_id)
        return result
    by_label = {v.label: v for v in verts}
    keep = None
    if lowest_two:
        keep = set(lowest_levels(verts, [r.vertebra for r in table.assigned()]))
    for rib in table.ribs:
        if keep is not None and rib.vertebra not in keep:
            continue
        res = RibResult(rib.label, rib.vertebra, rib.side, rib.volume_mm3)
        result.ribs.append(res)
        if rib.vertebra is None:
            continue
        vert = by_label[rib.vertebra]
        try:
            path = measure_rib(components.component(rib.component), vert.corpus_centroid, cfg)
        except IterationLimitError as exc:
            res.error = str(exc)
            res.path = exc.path
            continue
        res.path = path
        res.features = rib_features(
            subject_id, rib.anatomic_label, rib.side, path, vert.corpus_centroid, vert.frame, rib.volume_mm3, threshold_mm
        )
        res.is_stump = res.features.is_stump
    return result


def cohort_summary(results: list[SubjectResult]) -> dict:
    records = [rec for r in results for rec in r.records]
    stumps = [r for r in records if r.is_stump]
    regular = [r for r in records if not r.is_stump]
    subjects_with_sr = sum(any(rec.is_stump for rec in r.records) for r in results)
    out = {
        "schema_version": SCHEMA_VERSION,
        "n_subjects": len(results),
        "n_ribs_measured": len(records),
        "n_stump_ribs": len(stumps),
        "rib_stump_prevalence": len(stumps) / len(records) if records else None,
        "subjects_with_stump_rib": subjects_with_sr,
        "subject_stump_prevalence": subjects_with_sr / len(results) if results else None,
        "n_orphan_ribs": sum(len(r.assignment.orphans) for r in results),
        "n_measurement_errors": sum(1 for r in results for rib in r.ribs if rib.error),
        "feature_tests": {},
    }
    for name, getter in (("pdrc", lambda r: r.pdrc), ("vol_len_ratio", lambda r: r.volume_length_ratio)):
        entry = {}
        for cls, group in (("stump", stumps), ("regular", regular)):
            vals = [getter(r) for r in group]
            entry[cls] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)} if vals else None
        if stumps and regular:
            entry["rank_sum"] = wilcoxon_rank_sum([getter(r) for r in stumps], [getter(r) for r in regular]).as_dict()
        out["feature_tests"][name] = entry
    return out
