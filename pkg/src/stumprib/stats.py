"""Two-sided Wilcoxon signed-rank and rank-sum tests with exact small-sample p-values.

Exact null distributions are enumerated by dynamic programming over doubled
mid-ranks, so tied data keep an exact permutation distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

EXACT = "exact"
NORMAL = "normal_approx"
SIGNED_RANK_EXACT_MAX_N = 25
RANK_SUM_EXACT_MAX_NM = 400


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    method: str
    n: int
    m: int | None = None

    def as_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "method": self.method, "n": self.n, "m": self.m}


def _tie_sizes(values: np.ndarray) -> np.ndarray:
    _, counts = np.unique(values, return_counts=True)
    return counts[counts > 1].astype(float)


def _signed_rank_null(doubled: np.ndarray) -> np.ndarray:
    """Counts of every achievable doubled positive-rank sum over all 2^n sign patterns."""
    dp = np.zeros(int(doubled.sum()) + 1)
    dp[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(dp)
        shifted[r:] = dp[: len(dp) - r]
        dp = dp + shifted
    return dp


def wilcoxon_signed_rank(x, y=None, method: str | None = None) -> TestResult:
    """Paired test on ``x - y`` (or on ``x`` as differences); zero differences are dropped.

    The statistic is the smaller of the positive and negative rank sums.
    """
    x = np.asarray(x, float)
    if y is None and x.ndim == 2:
        x, y = x[:, 0], x[:, 1]
    d = x if y is None else x - np.asarray(y, float)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all paired differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    method = method or (EXACT if n <= SIGNED_RANK_EXACT_MAX_N else NORMAL)
    if method == EXACT:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_null(doubled)
        p = 2.0 * counts[: int(round(2 * stat)) + 1].sum() / counts.sum()
    else:
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(_tie_sizes(np.abs(d)) ** 3 - _tie_sizes(np.abs(d))) / 48.0
        p = _normal_two_sided(stat, mu, var)
    return TestResult(stat, float(min(1.0, p)), method, n)


def _normal_two_sided(stat: float, mu: float, var: float) -> float:
    if var <= 0:
        return 1.0
    z = max(abs(stat - mu) - 0.5, 0.0) / math.sqrt(var)
    return float(2.0 * norm.sf(z))


def _rank_sum_null(doubled: np.ndarray, k: int) -> np.ndarray:
    """Counts of doubled rank sums over all size-``k`` subsets of ``doubled``."""
    total = int(doubled.sum())
    dp = np.zeros((k + 1, total + 1))
    dp[0, 0] = 1.0
    for r in doubled:
        for j in range(k, 0, -1):
            dp[j, r:] += dp[j - 1, : total + 1 - r]
    return dp[k]


def wilcoxon_rank_sum(a, b, method: str | None = None) -> TestResult:
    """Mann-Whitney U of ``a`` (mid-ranks), two-sided."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    r_a = float(ranks[:n].sum())
    u = r_a - n * (n + 1) / 2.0
    method = method or (EXACT if n * m <= RANK_SUM_EXACT_MAX_NM else NORMAL)
    if method == EXACT:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _rank_sum_null(doubled, n)
        obs = int(round(2 * r_a))
        total = counts.sum()
        lower = counts[: obs + 1].sum() / total
        upper = counts[obs:].sum() / total
        p = 2.0 * min(lower, upper)
    else:
        big_n = n + m
        ties = _tie_sizes(pooled)
        var = n * m / 12.0 * ((big_n + 1) - np.sum(ties**3 - ties) / (big_n * (big_n - 1)))
        p = _normal_two_sided(u, n * m / 2.0, var)
    return TestResult(u, float(min(1.0, p)), method, n, m)
