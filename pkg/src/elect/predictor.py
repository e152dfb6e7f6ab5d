"""Pairwise performance-gap predictor.

Maps two IPM vectors to the AP gap between the models they describe. The
regressor is a squared-error gradient-boosted ensemble of depth-limited
regression trees with exact greedy splits, grown level by level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numba
import numpy as np

from .core import make_rng

N_FEATURES = 6
DEFAULT_PARAMS = {"n_trees": 200, "max_depth": 4, "learning_rate": 0.05, "min_leaf": 20, "seed": 0}
DEFAULT_PARAM_GRID = (
    {"n_trees": 200, "max_depth": 4, "learning_rate": 0.05, "min_leaf": 20, "seed": 0},
    {"n_trees": 100, "max_depth": 3, "learning_rate": 0.1, "min_leaf": 20, "seed": 0},
    {"n_trees": 150, "max_depth": 6, "learning_rate": 0.05, "min_leaf": 50, "seed": 0},
)
MIN_GAIN = 1e-12
GROUPED_TABLE_LIMIT = 4_000_000


@dataclass(frozen=True)
class PairSample:
    features: tuple[float, ...]
    target: float


@dataclass(frozen=True, eq=False)
class PairData:
    """Pair samples in array form: ``X`` (N x 6), ``y`` (N), owning task per row."""

    X: np.ndarray
    y: np.ndarray
    task: np.ndarray

    def __len__(self):
        return len(self.y)

    def __iter__(self) -> Iterator[PairSample]:
        for x, t in zip(self.X, self.y):
            yield PairSample(tuple(float(v) for v in x), float(t))

    def select(self, mask) -> "PairData":
        return PairData(self.X[mask], self.y[mask], self.task[mask])


def build_training_pairs(ipms, P, models=None) -> PairData:
    """Enumerate every model pair of every task, both orderings.

    ``ipms`` is an ``n x m x 3`` array (task, model, IPM); ``P`` the matching
    ``n x m`` performance values. Row ``(a, b)`` targets ``P[a] - P[b]``.
    ``models`` optionally restricts the pairs to a subset of model indices.
    """
    ipms = np.asarray(ipms, dtype=np.float64)
    P = np.asarray(getattr(P, "values", P), dtype=np.float64)
    if ipms.ndim != 3 or ipms.shape[2] != 3:
        raise ValueError("ipms must have shape (n, m, 3)")
    if ipms.shape[:2] != P.shape:
        raise ValueError(f"missing IPMs: have {ipms.shape[:2]}, need {P.shape}")
    if not np.all(np.isfinite(ipms)):
        raise ValueError("missing or non-finite IPM values")
    n, m = P.shape
    jj, kk = np.triu_indices(m, k=1)
    if models is not None:
        sub = np.array(sorted(set(int(j) for j in models)), dtype=np.int64)
        jj, kk = sub[jj[kk < len(sub)]], sub[kk[kk < len(sub)]]
    Xs, ys, ts = [], [], []
    for i in range(n):
        a, b = ipms[i, jj], ipms[i, kk]
        gap = P[i, jj] - P[i, kk]
        Xs.append(np.hstack([a, b]))
        ys.append(gap)
        Xs.append(np.hstack([b, a]))
        ys.append(-gap)
        ts.append(np.full(2 * len(jj), i, dtype=np.int64))
    if not Xs:
        return PairData(np.empty((0, N_FEATURES)), np.empty(0), np.empty(0, np.int64))
    return PairData(np.vstack(Xs), np.concatenate(ys), np.concatenate(ts))


# ---------------------------------------------------------------------------
# tree growth

@numba.njit(cache=True)
def _grow(X, order, resid, in_bag, max_depth, min_leaf, min_gain,
          feat, thr, left, right, value, node_of):
    """Grow one regression tree on ``resid``; returns the node count.

    On return ``node_of`` holds the leaf of every in-bag row (-1 otherwise).
    """
    N, F = X.shape
    for s in range(N):
        node_of[s] = 0 if in_bag[s] else -1
    cap = feat.shape[0]
    tot_sum = np.zeros(cap)
    tot_cnt = np.zeros(cap, np.int64)
    lsum = np.zeros(cap)
    lcnt = np.zeros(cap, np.int64)
    last = np.zeros(cap)
    best_gain = np.zeros(cap)
    best_feat = np.full(cap, -1, np.int64)
    best_thr = np.zeros(cap)
    level_start = 0
    level_end = 1
    n_nodes = 1
    feat[0] = -1
    for depth in range(max_depth + 1):
        for v in range(level_start, level_end):
            tot_sum[v] = 0.0
            tot_cnt[v] = 0
        for s in range(N):
            v = node_of[s]
            if v >= level_start:
                tot_sum[v] += resid[s]
                tot_cnt[v] += 1
        for v in range(level_start, level_end):
            feat[v] = -1
            value[v] = tot_sum[v] / tot_cnt[v] if tot_cnt[v] > 0 else 0.0
            best_feat[v] = -1
            best_gain[v] = min_gain
        if depth == max_depth:
            break
        any_split = False
        for f in range(F):
            for v in range(level_start, level_end):
                lsum[v] = 0.0
                lcnt[v] = 0
            for t in range(N):
                s = order[f, t]
                v = node_of[s]
                if v < level_start:
                    continue
                x = X[s, f]
                c = lcnt[v]
                if c > 0 and x > last[v]:
                    C = tot_cnt[v]
                    if c >= min_leaf and C - c >= min_leaf:
                        S = tot_sum[v]
                        L = lsum[v]
                        gain = L * L / c + (S - L) * (S - L) / (C - c) - S * S / C
                        if gain > best_gain[v]:
                            best_gain[v] = gain
                            best_feat[v] = f
                            mid = last[v] + (x - last[v]) * 0.5
                            if not (mid >= last[v] and mid < x):
                                mid = last[v]
                            best_thr[v] = mid
                lsum[v] += resid[s]
                lcnt[v] = c + 1
                last[v] = x
        next_start = n_nodes
        for v in range(level_start, level_end):
            if best_feat[v] >= 0 and n_nodes + 2 <= cap:
                feat[v] = best_feat[v]
                thr[v] = best_thr[v]
                left[v] = n_nodes
                right[v] = n_nodes + 1
                feat[n_nodes] = -1
                feat[n_nodes + 1] = -1
                n_nodes += 2
                any_split = True
        if not any_split:
            break
        for s in range(N):
            v = node_of[s]
            if v >= level_start and feat[v] >= 0:
                if X[s, feat[v]] <= thr[v]:
                    node_of[s] = left[v]
                else:
                    node_of[s] = right[v]
        level_start = next_start
        level_end = n_nodes
    return n_nodes


@numba.njit(cache=True)
def _grow_grouped(vid, uniq, n_uniq, resid, in_bag, max_depth, min_leaf, min_gain,
                  feat, thr, left, right, value, node_of):
    """Same contract as :func:`_grow`, using per-(node, distinct value) sums.

    ``vid[s, f]`` is the rank of sample ``s``'s value among the sorted
    distinct values ``uniq[f, :n_uniq[f]]`` of feature ``f``. Scanning the
    value table in rank order visits exactly the thresholds the sorted scan
    would, at a cost independent of the sample order.
    """
    N, F = vid.shape
    U = uniq.shape[1]
    for s in range(N):
        node_of[s] = 0 if in_bag[s] else -1
    cap = feat.shape[0]
    tot_sum = np.zeros(cap)
    tot_cnt = np.zeros(cap, np.int64)
    best_gain = np.zeros(cap)
    best_feat = np.full(cap, -1, np.int64)
    best_thr = np.zeros(cap)
    level_start = 0
    level_end = 1
    n_nodes = 1
    feat[0] = -1
    for depth in range(max_depth + 1):
        for v in range(level_start, level_end):
            tot_sum[v] = 0.0
            tot_cnt[v] = 0
        for s in range(N):
            v = node_of[s]
            if v >= level_start:
                tot_sum[v] += resid[s]
                tot_cnt[v] += 1
        for v in range(level_start, level_end):
            feat[v] = -1
            value[v] = tot_sum[v] / tot_cnt[v] if tot_cnt[v] > 0 else 0.0
            best_feat[v] = -1
            best_gain[v] = min_gain
        if depth == max_depth:
            break
        L = level_end - level_start
        tsum = np.zeros((F, L, U))
        tcnt = np.zeros((F, L, U), np.int64)
        for s in range(N):
            v = node_of[s]
            if v >= level_start:
                lv = v - level_start
                g = resid[s]
                for f in range(F):
                    u = vid[s, f]
                    tsum[f, lv, u] += g
                    tcnt[f, lv, u] += 1
        for f in range(F):
            nu = n_uniq[f]
            for v in range(level_start, level_end):
                C = tot_cnt[v]
                if C < 2 * min_leaf or C < 2:
                    continue
                S = tot_sum[v]
                lv = v - level_start
                Ls = 0.0
                c = 0
                last = 0.0
                for u in range(nu):
                    k = tcnt[f, lv, u]
                    if k == 0:
                        continue
                    x = uniq[f, u]
                    if c > 0 and c >= min_leaf and C - c >= min_leaf:
                        gain = Ls * Ls / c + (S - Ls) * (S - Ls) / (C - c) - S * S / C
                        if gain > best_gain[v]:
                            best_gain[v] = gain
                            best_feat[v] = f
                            mid = last + (x - last) * 0.5
                            if not (mid >= last and mid < x):
                                mid = last
                            best_thr[v] = mid
                    Ls += tsum[f, lv, u]
                    c += k
                    last = x
        any_split = False
        next_start = n_nodes
        for v in range(level_start, level_end):
            if best_feat[v] >= 0 and n_nodes + 2 <= cap:
                feat[v] = best_feat[v]
                thr[v] = best_thr[v]
                left[v] = n_nodes
                right[v] = n_nodes + 1
                feat[n_nodes] = -1
                feat[n_nodes + 1] = -1
                n_nodes += 2
                any_split = True
        if not any_split:
            break
        for s in range(N):
            v = node_of[s]
            if v >= level_start and feat[v] >= 0:
                if uniq[feat[v], vid[s, feat[v]]] <= thr[v]:
                    node_of[s] = left[v]
                else:
                    node_of[s] = right[v]
        level_start = next_start
        level_end = n_nodes
    return n_nodes


@numba.njit(cache=True)
def _predict_flat(X, feat, thr, left, right, value, roots, lr, base):
    N = X.shape[0]
    out = np.full(N, base)
    for s in range(N):
        acc = 0.0
        for t in range(roots.shape[0]):
            node = roots[t]
            while feat[node] >= 0:
                if X[s, feat[node]] <= thr[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += value[node]
        out[s] += lr * acc
    return out


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def to_dict(self) -> dict:
        return {
            "feature": [int(v) for v in self.feature],
            "threshold": [float(v) for v in self.threshold],
            "left": [int(v) for v in self.left],
            "right": [int(v) for v in self.right],
            "value": [float(v) for v in self.value],
        }

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=np.float64),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["value"], dtype=np.float64),
        )

    def same_as(self, other: "Tree", atol: float = 0.0) -> bool:
        return (
            np.array_equal(self.feature, other.feature)
            and np.array_equal(self.left, other.left)
            and np.array_equal(self.right, other.right)
            and np.allclose(self.threshold, other.threshold, rtol=0, atol=atol)
            and np.allclose(self.value, other.value, rtol=0, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class GbtModel:
    trees: tuple[Tree, ...]
    learning_rate: float
    base_score: float
    params: dict = field(default_factory=dict)

    @cached_property
    def _flat(self):
        feats, thrs, lefts, rights, vals, roots = [], [], [], [], [], []
        off = 0
        for t in self.trees:
            roots.append(off)
            feats.append(t.feature)
            thrs.append(t.threshold)
            lefts.append(np.where(t.left >= 0, t.left + off, -1))
            rights.append(np.where(t.right >= 0, t.right + off, -1))
            vals.append(t.value)
            off += len(t.feature)
        if not roots:
            return (np.array([-1], np.int64), np.zeros(1), np.zeros(1, np.int64), np.zeros(1, np.int64),
                    np.zeros(1), np.zeros(0, np.int64))
        return (np.concatenate(feats), np.concatenate(thrs), np.concatenate(lefts),
                np.concatenate(rights), np.concatenate(vals), np.array(roots, np.int64))

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        f, t, lft, rgt, v, roots = self._flat
        return _predict_flat(X, f, t, lft, rgt, v, roots, float(self.learning_rate), float(self.base_score))

    def to_dict(self) -> dict:
        return {
            "base_score": float(self.base_score),
            "learning_rate": float(self.learning_rate),
            "params": dict(self.params),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d) -> "GbtModel":
        return cls(tuple(Tree.from_dict(t) for t in d["trees"]), float(d["learning_rate"]),
                   float(d["base_score"]), dict(d.get("params", {})))


def _as_arrays(samples, y=None):
    if isinstance(samples, PairData):
        return samples.X, samples.y
    if y is not None:
        return np.asarray(samples, dtype=np.float64), np.asarray(y, dtype=np.float64)
    samples = list(samples)
    X = np.array([s.features for s in samples], dtype=np.float64).reshape(len(samples), -1)
    return X, np.array([s.target for s in samples], dtype=np.float64)


def fit_gbt(samples, y=None, *, n_trees: int = 200, max_depth: int = 4, learning_rate: float = 0.05,
            min_leaf: int = 20, seed: int = 0, subsample: float = 1.0) -> GbtModel:
    """Squared-error gradient boosting.

    ``samples`` is a :class:`PairData`, an iterable of :class:`PairSample`,
    or a feature matrix with targets in ``y``. Rows are sorted into a
    canonical order first, so the result does not depend on input order.
    """
    X, y = _as_arrays(samples, y)
    if len(y) < 2:
        raise ValueError("need at least 2 training samples")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    canon = np.lexsort(tuple([y] + [X[:, f] for f in range(X.shape[1] - 1, -1, -1)]))
    X = np.ascontiguousarray(X[canon])
    y = np.ascontiguousarray(y[canon])
    N, F = X.shape
    uniqs, vids = zip(*(np.unique(X[:, f], return_inverse=True) for f in range(F)))
    n_uniq = np.array([len(u) for u in uniqs], dtype=np.int64)
    width = int(n_uniq.max())
    # value tables are (level width x distinct values); fall back to the
    # sorted scan when that would be large
    grouped = F * (2**max_depth) * width <= GROUPED_TABLE_LIMIT
    if grouped:
        uniq = np.zeros((F, width))
        for f, u in enumerate(uniqs):
            uniq[f, : len(u)] = u
        vid = np.ascontiguousarray(np.stack([v.ravel() for v in vids], axis=1).astype(np.int64))
    else:
        order = np.ascontiguousarray(np.stack([np.argsort(X[:, f], kind="stable") for f in range(F)]))
    base = float(np.mean(y))
    pred = np.full(N, base)
    cap = 2 ** (max_depth + 1) + 1
    rng = make_rng(seed)
    trees = []
    in_bag = np.ones(N, dtype=np.bool_)
    leaf_of = np.empty(N, np.int64)
    for _ in range(n_trees):
        if subsample < 1.0:
            in_bag = rng.random(N) < subsample
        resid = y - pred
        feat = np.full(cap, -1, np.int64)
        thr = np.zeros(cap)
        left = np.full(cap, -1, np.int64)
        right = np.full(cap, -1, np.int64)
        value = np.zeros(cap)
        if grouped:
            k = _grow_grouped(vid, uniq, n_uniq, resid, in_bag, max_depth, min_leaf, MIN_GAIN,
                              feat, thr, left, right, value, leaf_of)
        else:
            k = _grow(X, order, resid, in_bag, max_depth, min_leaf, MIN_GAIN, feat, thr, left, right, value,
                      leaf_of)
        tree = Tree(feat[:k].copy(), thr[:k].copy(), left[:k].copy(), right[:k].copy(), value[:k].copy())
        trees.append(tree)
        if subsample < 1.0:
            pred = pred + GbtModel((tree,), learning_rate, 0.0).predict(X)
        else:
            pred = pred + learning_rate * tree.value[leaf_of]
    params = {"n_trees": n_trees, "max_depth": max_depth, "learning_rate": learning_rate,
              "min_leaf": min_leaf, "seed": seed}
    if subsample < 1.0:
        params["subsample"] = subsample
    return GbtModel(tuple(trees), learning_rate, base, params)


# ---------------------------------------------------------------------------
# gap prediction

def predict_gaps(model: GbtModel, A, B) -> np.ndarray:
    """Antisymmetrized, clamped gaps for rows of IPM matrices ``A`` and ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    f_ab = model.predict(np.hstack([A, B]))
    f_ba = model.predict(np.hstack([B, A]))
    return np.clip((f_ab - f_ba) / 2.0, -1.0, 1.0)


def predict_gap(model: GbtModel, a, b) -> float:
    a = getattr(a, "as_array", lambda: a)()
    b = getattr(b, "as_array", lambda: b)()
    return float(predict_gaps(model, a, b)[0])


def task_folds(tasks: np.ndarray, k_folds: int) -> list[np.ndarray]:
    """Assign whole tasks to folds round-robin over sorted task ids."""
    uniq = np.unique(tasks)
    if len(uniq) < k_folds:
        raise ValueError(f"need at least {k_folds} tasks for {k_folds}-fold CV, have {len(uniq)}")
    return [uniq[f::k_folds] for f in range(k_folds)]


def cv_fold_mse(data: PairData, params: dict, k_folds: int) -> list[float]:
    out = []
    for held in task_folds(data.task, k_folds):
        test = np.isin(data.task, held)
        model = fit_gbt(data.select(~test), **params)
        resid = model.predict(data.X[test]) - data.y[test]
        out.append(float(np.mean(resid * resid)))
    return out


def cv_tune_predictor(data: PairData, grid: Sequence[dict] = DEFAULT_PARAM_GRID, k_folds: int = 3) -> dict:
    """Grid search minimizing mean held-out MSE with folds split by task."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty parameter grid")
    if len(grid) == 1:
        task_folds(data.task, k_folds)
        return dict(grid[0])
    best, best_mse = None, math.inf
    for params in grid:
        mse = float(np.mean(cv_fold_mse(data, params, k_folds)))
        if mse < best_mse:
            best, best_mse = params, mse
    return dict(best)
