"""Consensus-based internal performance measures (IPMs).

Each IPM scores one model's outlier scores by their agreement with a small
anchor set of models, without labels:

* MC      mean Kendall tau-b between the target and each anchor,
* SELECT  Pearson correlation with the mean of the z-normalized anchors,
* HITS    target hub score in the bipartite model x sample graph whose edge
          weights are min-max normalized scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numba
import numpy as np

from .core import ModelId, znormalize

HITS_TOL = 1e-9
HITS_MAX_ITER = 100


@dataclass(frozen=True)
class IpmVector:
    mc: float
    select: float
    hits: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mc, self.select, self.hits])


@dataclass(frozen=True)
class AnchorSet:
    anchors: tuple[ModelId, ...]

    def __post_init__(self):
        if not self.anchors:
            raise ValueError("anchor set must be non-empty")
        object.__setattr__(self, "anchors", tuple(self.anchors))

    def __iter__(self):
        return iter(self.anchors)

    def __len__(self):
        return len(self.anchors)


# ---------------------------------------------------------------------------
# kernels

@numba.njit(cache=True)
def _kendall_tau_b(x, y):
    n = x.shape[0]
    concordant = 0
    discordant = 0
    tie_x = 0
    tie_y = 0
    for i in range(n - 1):
        xi = x[i]
        yi = y[i]
        for j in range(i + 1, n):
            dx = x[j] - xi
            dy = y[j] - yi
            if dx == 0.0:
                tie_x += 1
                if dy == 0.0:
                    tie_y += 1
            elif dy == 0.0:
                tie_y += 1
            elif (dx > 0.0) == (dy > 0.0):
                concordant += 1
            else:
                discordant += 1
    n0 = n * (n - 1) // 2
    denom = float(n0 - tie_x) * float(n0 - tie_y)
    if denom <= 0.0:
        return 0.0
    return (concordant - discordant) / math.sqrt(denom)


@numba.njit(cache=True)
def _hits_hub(rows, tol, max_iter):
    """Hub vector of the bipartite graph with weight matrix ``rows`` (M x r).

    Returns (hub, iterations, final change).
    """
    M, r = rows.shape
    h = np.full(M, 1.0 / math.sqrt(M))
    a = np.empty(r)
    h_new = np.empty(M)
    change = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        # authority a = W^T h
        a_norm = 0.0
        for s in range(r):
            acc = 0.0
            for q in range(M):
                acc += rows[q, s] * h[q]
            a[s] = acc
            a_norm += acc * acc
        a_norm = math.sqrt(a_norm)
        if a_norm == 0.0:
            return np.full(M, 1.0 / math.sqrt(M)), it, 0.0
        for s in range(r):
            a[s] /= a_norm
        # hub h = W a
        h_norm = 0.0
        for q in range(M):
            acc = 0.0
            for s in range(r):
                acc += rows[q, s] * a[s]
            h_new[q] = acc
            h_norm += acc * acc
        h_norm = math.sqrt(h_norm)
        change = 0.0
        for q in range(M):
            v = h_new[q] / h_norm
            change += (v - h[q]) ** 2
            h[q] = v
        change = math.sqrt(change)
        if change < tol:
            break
    return h, it, change


def kendall_tau_b(x, y) -> float:
    """Kendall tau-b; 0 when either side is constant."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("length mismatch")
    return float(_kendall_tau_b(x, y))


def minmax(x) -> np.ndarray:
    """Scale to [0, 1]; constant vectors map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def pearson(x, y) -> float:
    """Pearson correlation; 0 when either side is constant."""
    zx = znormalize(x)
    zy = znormalize(y)
    if not zx.any() or not zy.any():
        return 0.0
    return float(np.clip(np.mean(zx * zy), -1.0, 1.0))


def hits_hub_vector(weight_rows) -> tuple[np.ndarray, int, float]:
    """Hub vector, iteration count and final L2 change for a weight matrix."""
    W = np.ascontiguousarray(weight_rows, dtype=np.float64)
    h, it, change = _hits_hub(W, HITS_TOL, HITS_MAX_ITER)
    return h, int(it), float(change)


# ---------------------------------------------------------------------------
# the three measures

def _check(target, anchors):
    target = np.asarray(target, dtype=np.float64)
    if len(anchors) == 0:
        raise ValueError("anchors must be non-empty")
    for a in anchors:
        if np.shape(a) != target.shape:
            raise ValueError("length mismatch between target and anchor scores")
    return target


def mc_score(target, anchors: Sequence) -> float:
    target = _check(target, anchors)
    taus = [kendall_tau_b(target, a) for a in anchors]
    return float(np.mean(taus))


def consensus(anchors: Sequence) -> np.ndarray:
    """Pseudo ground truth: element-wise mean of z-normalized anchor scores."""
    return np.mean([znormalize(a) for a in anchors], axis=0)


def select_score(target, anchors: Sequence) -> float:
    target = _check(target, anchors)
    return pearson(target, consensus(anchors))


def hits_score(target, anchors: Sequence) -> float:
    target = _check(target, anchors)
    rows = np.vstack([minmax(a) for a in anchors] + [minmax(target)])
    h, _, _ = hits_hub_vector(rows)
    return float(h[-1])


def compute_ipms(
    target: ModelId,
    target_scores,
    anchor_scores: Mapping[ModelId, np.ndarray],
) -> IpmVector:
    """IPMs of ``target`` against cached anchor scores on the same dataset.

    If the target is itself an anchor it is compared with the remaining
    anchors only; a lone anchor is compared with itself.
    """
    others = [s for m, s in anchor_scores.items() if m != target]
    if not others:
        others = [np.asarray(target_scores, dtype=np.float64)]
    return IpmVector(
        mc_score(target_scores, others),
        select_score(target_scores, others),
        hits_score(target_scores, others),
    )


class TaskIpmCache:
    """Per-dataset cache of the pieces IPMs are built from.

    Holds the ``m x r`` z-normalized score matrix of one task and memoizes
    Kendall tau columns and normalized rows so that IPMs for many anchor
    sets can be assembled cheaply during anchor selection. Produces exactly
    the same numbers as :func:`compute_ipms`.
    """

    def __init__(self, scores: np.ndarray):
        self.scores = np.ascontiguousarray(scores, dtype=np.float64)
        self._tau: dict[int, np.ndarray] = {}
        self._z: dict[int, np.ndarray] = {}
        self._mm: dict[int, np.ndarray] = {}

    def tau_column(self, a: int) -> np.ndarray:
        if a not in self._tau:
            col = np.empty(self.scores.shape[0])
            for j in range(self.scores.shape[0]):
                col[j] = _kendall_tau_b(self.scores[j], self.scores[a])
            self._tau[a] = col
        return self._tau[a]

    def z(self, j: int) -> np.ndarray:
        if j not in self._z:
            self._z[j] = znormalize(self.scores[j])
        return self._z[j]

    def mm(self, j: int) -> np.ndarray:
        if j not in self._mm:
            self._mm[j] = minmax(self.scores[j])
        return self._mm[j]

    def ipms(self, anchors: Sequence[int], models: Sequence[int] | None = None) -> np.ndarray:
        """``len(models) x 3`` array of (mc, select, hits)."""
        anchors = list(anchors)
        models = range(self.scores.shape[0]) if models is None else models
        taus = {a: self.tau_column(a) for a in anchors}
        cons_all = np.mean([self.z(a) for a in anchors], axis=0)
        mm_rows = np.vstack([self.mm(a) for a in anchors])
        out = []
        for j in models:
            others = [a for a in anchors if a != j] or [j]
            if len(others) == len(anchors):
                cons = cons_all
                rows = mm_rows
            else:
                cons = np.mean([self.z(a) for a in others], axis=0)
                rows = np.vstack([self.mm(a) for a in others])
            if others == [j]:
                mc = float(np.mean([_kendall_tau_b(self.scores[j], self.scores[j])]))
            else:
                mc = float(np.mean([taus[a][j] for a in others]))
            sel = pearson(self.scores[j], cons)
            h, _, _ = hits_hub_vector(np.vstack([rows, self.mm(j)[None, :]]))
            out.append((mc, sel, float(h[-1])))
        return np.array(out, dtype=np.float64).reshape(-1, 3)
