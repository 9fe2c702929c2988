"""Soft-margin SVM (SMO dual solver) and the seeded stump-rib classification experiments."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import TABLE5_FEATURE_SETS, FeatureSet, build_feature_matrix, filter_by_path
from .rlma import STUMP_THRESHOLD_MM

log = logging.getLogger(__name__)

LINEAR, POLYNOMIAL = "linear", "polynomial"
N_SEEDS = 10
TRAIN_FRACTION = 0.7

# 64-bit LCG (Knuth's MMIX constants) for reproducible subject splits
LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class KernelSpec:
    kind: str = LINEAR
    degree: int = 5
    coef0: float = 1.0
    gamma: float | None = None  # None -> 1 / n_features

    def __post_init__(self):
        if self.kind not in (LINEAR, POLYNOMIAL):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")

    @property
    def name(self) -> str:
        return self.kind if self.kind == LINEAR else f"{self.kind}{self.degree}"

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        dot = a @ b.T
        if self.kind == LINEAR:
            return dot
        gamma = self.gamma if self.gamma is not None else 1.0 / a.shape[1]
        return (gamma * dot + self.coef0) ** self.degree


POLY5 = KernelSpec(POLYNOMIAL, degree=5)
LINEAR_KERNEL = KernelSpec(LINEAR)


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float
    kernel: KernelSpec
    mean: np.ndarray
    std: np.ndarray
    kkt_gap: float
    iterations: int

    @property
    def n_features(self) -> int:
        return len(self.mean)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} feature columns, got shape {X.shape}")
        Xs = (X - self.mean) / self.std
        if len(self.support_vectors) == 0:
            return np.full(len(X), self.bias)
        return self.kernel(Xs, self.support_vectors) @ self.dual_coef + self.bias


def _as_pm1(y) -> np.ndarray:
    y = np.asarray(y)
    if y.dtype == bool:
        return np.where(y, 1, -1)
    return np.where(y > 0, 1, -1)


def train_svm(X, y, kernel: KernelSpec = LINEAR_KERNEL, C: float = 1.0, tol: float = 1e-3, max_iter: int | None = None):
    """Solve the soft-margin dual with SMO using second-order working-set selection.

    Columns are standardized with training statistics. Labels may be boolean,
    0/1 or -1/+1; positive means stump.
    """
    X = np.asarray(X, float)
    y = _as_pm1(y).astype(float)
    if len(np.unique(y)) < 2:
        raise ValueError("training data contains a single class")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Xs = (X - mean) / std
    K = kernel(Xs, Xs)
    n = len(y)
    Q = K * np.outer(y, y)
    diag = np.diag(K).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)
    tau = 1e-12
    max_iter = max_iter or max(100_000, 100 * n)
    gap = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        up = ((alpha < C) & (y > 0)) | ((alpha > 0) & (y < 0))
        low = ((alpha < C) & (y < 0)) | ((alpha > 0) & (y > 0))
        score = -y * grad
        i = int(np.argmax(np.where(up, score, -np.inf)))
        m_up = score[i]
        m_low = np.min(np.where(low, score, np.inf))
        gap = m_up - m_low
        if gap < tol:
            break
        b = m_up - score
        a = np.maximum(diag[i] + diag - 2.0 * K[i], tau)
        obj = np.where(low & (score < m_up), -(b * b) / a, np.inf)
        j = int(np.argmin(obj))

        ai_old, aj_old = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(diag[i] + diag[j] - 2.0 * K[i, j], tau)
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, C - diff
            elif alpha[j] > C:
                alpha[j], alpha[i] = C, C + diff
        else:
            quad = max(diag[i] + diag[j] - 2.0 * K[i, j], tau)
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, total - C
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > C:
                if alpha[j] > C:
                    alpha[j], alpha[i] = C, total - C
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total
        grad += Q[:, i] * (alpha[i] - ai_old) + Q[:, j] * (alpha[j] - aj_old)
    else:
        log.warning("SMO stopped at the iteration cap with KKT gap %.3g", gap)

    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(yg[free].mean())
    else:
        at_upper = alpha >= C
        ub_mask = (at_upper & (y < 0)) | (~at_upper & (y > 0))
        lb_mask = ~ub_mask
        ub = yg[ub_mask].min() if ub_mask.any() else math.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -math.inf
        rho = float((ub + lb) / 2)
    sv = alpha > 0
    return SvmModel(Xs[sv], (alpha * y)[sv], -rho, kernel, mean, std, float(gap), it)


def predict(model: SvmModel, X) -> np.ndarray:
    return np.where(model.decision_function(X) >= 0, 1, -1)


def f1_score(pred, truth) -> float:
    """F1 of the positive (stump) class; 0 when there is nothing to score."""
    pred = _as_pm1(pred)
    truth = _as_pm1(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    tp = int(np.sum((pred > 0) & (truth > 0)))
    fp = int(np.sum((pred > 0) & (truth < 0)))
    fn = int(np.sum((pred < 0) & (truth > 0)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def lcg64(seed: int):
    state = seed & MASK64
    while True:
        state = (LCG_MULTIPLIER * state + LCG_INCREMENT) & MASK64
        yield state


def seeded_split(subject_ids, seed: int, train_fraction: float = TRAIN_FRACTION) -> tuple[list, list]:
    """Subject-wise split: sorted unique ids, Fisher-Yates shuffled by a 64-bit LCG.

    Swap index ``j`` for position ``i`` is ``((x >> 32) * (i + 1)) >> 32`` with
    ``x`` the next generator output; the first ``floor(train_fraction * n)``
    ids form the training set.
    """
    ids = sorted(set(subject_ids), key=str)
    if len(ids) < 2:
        raise ValueError("need at least two subjects to split")
    gen = lcg64(seed)
    for i in range(len(ids) - 1, 0, -1):
        j = ((next(gen) >> 32) * (i + 1)) >> 32
        ids[i], ids[j] = ids[j], ids[i]
    n_train = int(math.floor(train_fraction * len(ids) + 1e-9))
    return ids[:n_train], ids[n_train:]


@dataclass
class ExperimentResult:
    feature_set: str
    kernel: str
    f1: list[float] = field(default_factory=list)  # NaN where a split had a single training class

    @property
    def mean(self) -> float:
        vals = [v for v in self.f1 if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def std(self) -> float:
        vals = [v for v in self.f1 if not math.isnan(v)]
        return float(np.std(vals)) if vals else math.nan


def _seed_f1(X, y, subjects, seed, kernel, C) -> float:
    train_ids, _ = seeded_split(subjects, seed)
    train = np.isin(subjects, train_ids)
    if len(np.unique(y[train])) < 2:
        return math.nan
    model = train_svm(X[train], y[train], kernel, C)
    return f1_score(predict(model, X[~train]), y[~train])


def _run_one(args) -> ExperimentResult:
    X, y, subjects, fs_name, kernel, C, seeds = args
    return ExperimentResult(fs_name, kernel.name, [_seed_f1(X, y, subjects, s, kernel, C) for s in seeds])


def run_experiments(
    records,
    feature_sets=TABLE5_FEATURE_SETS,
    kernels=(POLY5, LINEAR_KERNEL),
    seeds=range(N_SEEDS),
    C: float = 1.0,
    jobs: int = 1,
) -> list[ExperimentResult]:
    """F1 over seeded subject-wise splits for every (feature set, kernel), feature-set major."""
    seeds = list(seeds)
    need = max(fs.min_points for fs in feature_sets)
    records = filter_by_path(records, need)
    tasks = []
    for fs in feature_sets:
        fm = build_feature_matrix(records, fs)
        for kernel in kernels:
            tasks.append((fm.X, fm.y, fm.subjects, fs.name, kernel, C, seeds))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(t) for t in tasks]


def run_table5(records, seeds=range(N_SEEDS), C: float = 1.0, jobs: int = 1) -> list[ExperimentResult]:
    return run_experiments(records, TABLE5_FEATURE_SETS, (POLY5, LINEAR_KERNEL), seeds, C, jobs)


@dataclass
class SweepPoint:
    threshold_mm: float
    feature_set: str
    mean_f1: float | None
    std_f1: float | None


def threshold_sweep(
    records,
    thresholds,
    feature_sets=(FeatureSet(2), FeatureSet(3), FeatureSet(4), FeatureSet(None, True), FeatureSet(4, True)),
    kernel: KernelSpec = LINEAR_KERNEL,
    seeds=range(N_SEEDS),
    C: float = 1.0,
    jobs: int = 1,
) -> list[SweepPoint]:
    """Relabel stumps at each length threshold and rerun the seeded experiment."""
    points = []
    for t in thresholds:
        relabeled = [r.relabeled(t) for r in records]
        n_pos = sum(r.is_stump for r in relabeled)
        if n_pos == 0 or n_pos == len(relabeled):
            points.extend(SweepPoint(float(t), fs.name, None, None) for fs in feature_sets)
            continue
        for res in run_experiments(relabeled, feature_sets, (kernel,), seeds, C, jobs):
            ok = not math.isnan(res.mean)
            points.append(SweepPoint(float(t), res.feature_set, res.mean if ok else None, res.std if ok else None))
    return points


REFERENCE_THRESHOLD_MM = STUMP_THRESHOLD_MM
