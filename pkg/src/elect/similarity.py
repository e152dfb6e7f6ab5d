"""Performance-driven task similarity (weighted Kendall tau) and neighbor sets."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np


class GapSource(enum.Enum):
    GROUND_TRUTH = "ground_truth"
    PREDICTED = "predicted"


def subset_pairs(subset: Sequence[int]) -> np.ndarray:
    """All ``(j, j')`` with ``j < j'`` from ``subset``, lexicographically sorted."""
    idx = sorted(int(j) for j in subset)
    if len(set(idx)) != len(idx):
        raise ValueError("subset contains duplicates")
    pairs = list(combinations(idx, 2))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class GapTable:
    pairs: np.ndarray
    gaps: np.ndarray
    source: GapSource = GapSource.GROUND_TRUTH

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        gaps = np.asarray(self.gaps, dtype=np.float64)
        if gaps.shape != (len(pairs),):
            raise ValueError("one gap per pair required")
        if len(pairs) and np.any(pairs[:, 0] >= pairs[:, 1]):
            raise ValueError("pairs must satisfy j < j'")
        keys = [tuple(p) for p in pairs]
        if keys != sorted(set(keys)):
            raise ValueError("pairs must be unique and lexicographically sorted")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "gaps", gaps)

    @classmethod
    def from_performance(cls, row, subset: Sequence[int] | None = None) -> "GapTable":
        row = np.asarray(row, dtype=np.float64)
        if subset is None:
            subset = range(len(row))
        pairs = subset_pairs(subset)
        return cls(pairs, row[pairs[:, 0]] - row[pairs[:, 1]], GapSource.GROUND_TRUTH)


def pair_weights(ga, gb) -> np.ndarray:
    """Per-pair weights of the weighted Kendall tau (broadcasts).

    1 when both gaps vanish; otherwise the ratio of the smaller-magnitude
    gap to the larger one, which carries the concordance sign.
    """
    ga = np.asarray(ga, dtype=np.float64)
    gb = np.asarray(gb, dtype=np.float64)
    ga, gb = np.broadcast_arrays(ga, gb)
    both_zero = (ga == 0) & (gb == 0)
    a_small = np.abs(ga) <= np.abs(gb)
    num = np.where(a_small, ga, gb)
    den = np.where(a_small, gb, ga)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(both_zero, 1.0, num / np.where(den == 0, 1.0, den))
    return w


def tau_from_gaps(ga, gb) -> np.ndarray:
    """Weighted tau along the last axis; 0 where every weight is zero."""
    w = pair_weights(ga, gb)
    num = w.sum(axis=-1)
    den = np.abs(w).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def weighted_kendall_tau(gaps_a: GapTable, gaps_b: GapTable) -> float:
    if gaps_a.pairs.shape != gaps_b.pairs.shape or not np.array_equal(gaps_a.pairs, gaps_b.pairs):
        raise ValueError("gap tables cover different pair lists")
    return float(tau_from_gaps(gaps_a.gaps, gaps_b.gaps))


def tau_to_meta_task(predicted: GapTable, P_i, subset: Sequence[int]) -> float:
    """Estimated similarity between the test task and one meta-train task."""
    truth = GapTable.from_performance(P_i, subset)
    return weighted_kendall_tau(predicted, truth)


def taus_to_meta_tasks(predicted: GapTable, P: np.ndarray) -> np.ndarray:
    """Vectorized :func:`tau_to_meta_task` against every row of ``P``."""
    P = np.asarray(P, dtype=np.float64)
    pr = predicted.pairs
    truth = P[:, pr[:, 0]] - P[:, pr[:, 1]]
    return tau_from_gaps(predicted.gaps[None, :], truth)


def performance_tau(row_a, row_b, subset: Sequence[int] | None = None) -> float:
    """Ground-truth weighted tau between two performance rows."""
    return weighted_kendall_tau(GapTable.from_performance(row_a, subset), GapTable.from_performance(row_b, subset))


@dataclass(frozen=True)
class NeighborSet:
    dataset_ids: tuple[str, ...]
    similarities: tuple[float, ...]

    def __len__(self):
        return len(self.dataset_ids)


def top_t_neighbors(taus, t: int, dataset_ids: Sequence[str]) -> NeighborSet:
    """The ``t`` most similar tasks; equal taus ordered by dataset id."""
    taus = np.asarray(taus, dtype=np.float64)
    n = len(taus)
    if len(dataset_ids) != n:
        raise ValueError("one id per tau required")
    if t < 1 or t > n:
        raise ValueError(f"t={t} must lie in [1, n={n}]")
    order = sorted(range(n), key=lambda i: (-taus[i], dataset_ids[i]))[:t]
    return NeighborSet(tuple(dataset_ids[i] for i in order), tuple(float(taus[i]) for i in order))
