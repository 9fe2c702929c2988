"""Vertebra-relative rib features: DRC/PDRC, n-PPR directions, volume-to-length ratio."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .instances import LEFT, RIGHT
from .rlma import PathPolyline, classify_stump

log = logging.getLogger(__name__)

AXES = ("r", "a", "s")
MAX_EXPORTED_PPR = 3  # direction vectors written to CSV, enough for 4-PPR


class InsufficientPathError(ValueError):
    pass


@dataclass
class RibFeatureRecord:
    subject_id: str
    rib_label: str
    side: str
    length_mm: float
    is_stump: bool
    drc: np.ndarray  # (right, anterior, superior) mm, vertebra frame, mirrored
    ppr: np.ndarray  # (k, 3) unit direction vectors between consecutive path points
    volume_length_ratio: float
    volume_mm3: float = float("nan")
    path: PathPolyline | None = field(default=None, repr=False)

    def __post_init__(self):
        self.drc = np.asarray(self.drc, float).reshape(3)
        self.ppr = np.asarray(self.ppr, float).reshape(-1, 3)

    @property
    def pdrc(self) -> float:
        return float(self.drc[1])

    @property
    def n_points(self) -> int:
        return len(self.ppr) + 1

    def relabeled(self, threshold_mm: float) -> RibFeatureRecord:
        rec = RibFeatureRecord(**{**self.__dict__})
        rec.is_stump = classify_stump(self.length_mm, threshold_mm)
        return rec

    def as_row(self) -> dict:
        row = {"subject_id": self.subject_id, "rib_label": self.rib_label, "side": self.side}
        for i in range(MAX_EXPORTED_PPR):
            for j, ax in enumerate(AXES):
                row[f"ppr{i + 1}_{ax}"] = f"{self.ppr[i, j]:.6f}" if i < len(self.ppr) else ""
        for j, ax in enumerate(AXES):
            row[f"drc_{ax}"] = f"{self.drc[j]:.6f}"
        row["pdrc"] = f"{self.pdrc:.6f}"
        row["vol_len_ratio"] = f"{self.volume_length_ratio:.6f}"
        row["length_mm"] = f"{self.length_mm:.6f}"
        row["is_stump"] = int(self.is_stump)
        row["schema_version"] = CSV_SCHEMA_VERSION
        return row


CSV_COLUMNS = (
    ["subject_id", "rib_label", "side"]
    + [f"ppr{i + 1}_{ax}" for i in range(MAX_EXPORTED_PPR) for ax in AXES]
    + [f"drc_{ax}" for ax in AXES]
    + ["pdrc", "vol_len_ratio", "length_mm", "is_stump", "schema_version"]
)
CSV_SCHEMA_VERSION = 1


def to_vertebra_frame(v, frame, side: str) -> np.ndarray:
    """Express a world vector in the vertebra frame; left-side vectors get their Right component negated."""
    out = np.asarray(frame, float).T @ np.asarray(v, float)
    if side == LEFT:
        out[0] = -out[0]
    elif side != RIGHT:
        raise ValueError(f"side must be {LEFT!r} or {RIGHT!r}")
    return out


def compute_drc(start_point, corpus_center, frame, side: str) -> np.ndarray:
    return to_vertebra_frame(np.asarray(start_point, float) - np.asarray(corpus_center, float), frame, side)


def path_directions(path, frame, side: str) -> np.ndarray:
    pts = path.points if isinstance(path, PathPolyline) else np.asarray(path, float)
    steps = np.diff(pts, axis=0)
    norms = np.linalg.norm(steps, axis=1)
    steps = steps[norms > 0] / norms[norms > 0, None]
    if len(steps) == 0:
        return np.zeros((0, 3))
    return np.array([to_vertebra_frame(s, frame, side) for s in steps])


def compute_nppr(path, n: int, frame, side: str) -> np.ndarray:
    if n < 2:
        raise ValueError("n-PPR needs n >= 2")
    pts = path.points if isinstance(path, PathPolyline) else np.asarray(path, float)
    if len(pts) < n:
        raise InsufficientPathError(f"{n}-PPR needs {n} path points, path has {len(pts)}")
    return path_directions(pts[:n], frame, side)


def volume_length_ratio(volume_mm3: float, length_mm: float) -> float:
    if length_mm <= 0:
        raise ValueError("length must be positive")
    return volume_mm3 / length_mm


def rib_features(
    subject_id: str,
    rib_label: str,
    side: str,
    path: PathPolyline,
    corpus_center,
    frame,
    volume_mm3: float,
    threshold_mm: float = 38.0,
) -> RibFeatureRecord:
    length = path.length
    return RibFeatureRecord(
        subject_id=subject_id,
        rib_label=str(rib_label),
        side=side,
        length_mm=length,
        is_stump=classify_stump(length, threshold_mm),
        drc=compute_drc(path.start, corpus_center, frame, side),
        ppr=path_directions(path, frame, side),
        volume_length_ratio=volume_length_ratio(volume_mm3, length) if length > 0 else float("nan"),
        volume_mm3=volume_mm3,
        path=path,
    )


@dataclass(frozen=True)
class FeatureSet:
    n_ppr: int | None = None
    drc: bool = False

    def __post_init__(self):
        if self.n_ppr is None and not self.drc:
            raise ValueError("empty feature set")
        if self.n_ppr is not None and self.n_ppr < 2:
            raise ValueError("n-PPR needs n >= 2")

    @property
    def name(self) -> str:
        parts = []
        if self.n_ppr:
            parts.append(f"{self.n_ppr}-PPR")
        if self.drc:
            parts.append("DRC")
        return "+".join(parts)

    @property
    def n_columns(self) -> int:
        return (3 * (self.n_ppr - 1) if self.n_ppr else 0) + (3 if self.drc else 0)

    @property
    def min_points(self) -> int:
        return self.n_ppr or 1

    @classmethod
    def parse(cls, name: str) -> FeatureSet:
        n_ppr, drc = None, False
        for part in name.replace(" and ", "+").split("+"):
            part = part.strip().upper()
            if part == "DRC":
                drc = True
            elif part.endswith("-PPR"):
                n_ppr = int(part[:-4])
            else:
                raise ValueError(f"unknown feature set component {part!r}")
        return cls(n_ppr, drc)


# rows of the published comparison table, in order
TABLE5_FEATURE_SETS = (
    FeatureSet(2),
    FeatureSet(3),
    FeatureSet(4),
    FeatureSet(None, True),
    FeatureSet(2, True),
    FeatureSet(3, True),
    FeatureSet(4, True),
)


@dataclass
class FeatureMatrix:
    records: list[RibFeatureRecord]
    feature_set: FeatureSet
    X: np.ndarray
    columns: list[str]

    @property
    def y(self) -> np.ndarray:
        return np.array([1 if r.is_stump else -1 for r in self.records])

    @property
    def subjects(self) -> np.ndarray:
        return np.array([r.subject_id for r in self.records])


def _sort_key(rec: RibFeatureRecord):
    return (rec.subject_id, rec.rib_label)


def build_feature_matrix(records, feature_set: FeatureSet) -> FeatureMatrix:
    """Design matrix: flattened PPR vectors, then DRC; rows sorted by (subject, rib)."""
    records = sorted(records, key=_sort_key)
    k = feature_set.n_ppr - 1 if feature_set.n_ppr else 0
    columns = [f"ppr{i + 1}_{ax}" for i in range(k) for ax in AXES]
    if feature_set.drc:
        columns += [f"drc_{ax}" for ax in AXES]
    rows = []
    for rec in records:
        if len(rec.ppr) < k:
            raise InsufficientPathError(
                f"{rec.subject_id}/{rec.rib_label}: {feature_set.name} needs {k + 1} path points, has {rec.n_points}"
            )
        parts = [rec.ppr[:k].ravel()]
        if feature_set.drc:
            parts.append(rec.drc)
        rows.append(np.concatenate(parts))
    X = np.array(rows, dtype=float).reshape(len(records), len(columns))
    return FeatureMatrix(records, feature_set, X, columns)


def filter_by_path(records, min_points: int) -> list[RibFeatureRecord]:
    kept = [r for r in records if r.n_points >= min_points]
    if len(kept) < len(records):
        log.info("excluded %d ribs with fewer than %d path points", len(records) - len(kept), min_points)
    return kept


def write_features_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rec in sorted(records, key=_sort_key):
            writer.writerow(rec.as_row())


class FeatureSchemaError(ValueError):
    pass


def read_features_csv(path) -> list[RibFeatureRecord]:
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c != "schema_version" and c not in (reader.fieldnames or [])]
        if missing:
            raise FeatureSchemaError(f"feature CSV lacks columns {missing}")
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                ppr = []
                for i in range(MAX_EXPORTED_PPR):
                    cells = [row[f"ppr{i + 1}_{ax}"] for ax in AXES]
                    if any(c == "" for c in cells):
                        break
                    ppr.append([float(c) for c in cells])
                records.append(
                    RibFeatureRecord(
                        subject_id=row["subject_id"],
                        rib_label=row["rib_label"],
                        side=row["side"],
                        length_mm=float(row["length_mm"]),
                        is_stump=bool(int(row["is_stump"])),
                        drc=[float(row[f"drc_{ax}"]) for ax in AXES],
                        ppr=np.array(ppr).reshape(-1, 3),
                        volume_length_ratio=float(row["vol_len_ratio"]),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise FeatureSchemaError(f"line {line}: {exc}") from exc
    return records
