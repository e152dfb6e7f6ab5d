"""Detection metrics: average precision, AP-rank, Wilcoxon signed-rank test."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 15


def average_precision(scores, labels) -> float:
    """Mean precision at the rank of each positive, scores sorted descending.

    Tied scores keep ascending sample-index order (stable sort), no
    interpolation.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.shape} scores vs {y.shape} labels")
    n_pos = int(np.sum(y == 1))
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    hits = (y[order] == 1)
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(s) + 1)
    return float(np.sum(cum[hits] / ranks[hits]) / n_pos)


def ap_ranks(ap_all) -> np.ndarray:
    """Fractional descending ranks (1 = best) of every entry, ties averaged."""
    return rankdata(-np.asarray(ap_all, dtype=np.float64), method="average")


def ap_rank(ap_all, j: int) -> float:
    """Rank of model ``j`` (0-based index) among all models by AP."""
    a = np.asarray(ap_all, dtype=np.float64)
    if not 0 <= j < len(a):
        raise IndexError(f"model index {j} outside 0..{len(a) - 1}")
    greater = np.sum(a > a[j])
    equal = np.sum(a == a[j])
    return float(greater + (equal + 1) / 2.0)


def virtual_rank(ap_all, ap_value: float) -> float:
    """Position ``ap_value`` would occupy among ``ap_all`` (ties averaged)."""
    a = np.asarray(ap_all, dtype=np.float64)
    greater = np.sum(a > ap_value)
    equal = np.sum(a == ap_value)
    return float(min(greater + (equal + 2) / 2.0, len(a)))


class WilcoxonError(ValueError):
    pass


def _exact_null(ranks: np.ndarray) -> np.ndarray:
    """W+ for every one of the 2**n sign assignments of ``ranks``."""
    n = len(ranks)
    # twice the ranks are integers even with average ties
    r2 = np.rint(2 * ranks).astype(np.int64)
    codes = np.arange(2**n, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(n)) & 1
    return bits @ r2


def wilcoxon_signed_rank(pairs, method: str = "auto") -> tuple[float, float]:
    """Paired two-sided Wilcoxon signed-rank test.

    Returns ``(statistic, p_value)`` where ``statistic = W+ - W-`` (positive
    when ``a`` tends to exceed ``b``). Zero differences are dropped. With at
    most 15 non-zero differences the null is enumerated exactly; otherwise a
    normal approximation with tie and continuity correction is used.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("pairs must be a sequence of (a, b)")
    diff = arr[:, 0] - arr[:, 1]
    diff = diff[diff != 0]
    n = len(diff)
    if n < 5:
        raise WilcoxonError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(diff), method="average")
    w_plus = float(ranks[diff > 0].sum())
    total = n * (n + 1) / 2.0
    stat = 2.0 * w_plus - total
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"
    if method == "exact":
        null2 = _exact_null(ranks)
        w2 = int(round(2 * w_plus))
        lower = np.count_nonzero(null2 <= w2) / len(null2)
        upper = np.count_nonzero(null2 >= w2) / len(null2)
        p = min(1.0, 2.0 * min(lower, upper))
    elif method == "approx":
        _, counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
        mean = total / 2.0
        dev = abs(w_plus - mean) - 0.5
        if var <= 0:
            p = 1.0
        else:
            z = max(dev, 0.0) / math.sqrt(var)
            p = float(min(1.0, 2.0 * norm.sf(z)))
    else:
        raise ValueError(f"unknown method {method!r}")
    return stat, float(p)
