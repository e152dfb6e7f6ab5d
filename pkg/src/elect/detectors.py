"""Outlier-detector zoo and hyperparameter-grid expansion.

Every family function returns raw scores (higher = more outlying);
:func:`fit_score` dispatches on a :class:`ModelId` and z-normalizes.
"""

from __future__ import annotations

import itertools
import json
import math
from importlib import resources
from pathlib import Path

import numba
import numpy as np

from .core import Dataset, Family, ModelId, ModelSet, make_rng, znormalize

LRD_CAP = 1e12
HBOS_EPS = 1e-12

# Per family: ordered hyperparameter names with their value domains.
# A domain is either a tuple of allowed values or a validator callable.
_POSITIVE_INT = lambda v: isinstance(v, int) and not isinstance(v, bool) and v > 0  # noqa: E731
_FRACTION = lambda v: isinstance(v, (int, float)) and 0 < float(v) < 1  # noqa: E731
_SEED = lambda v: isinstance(v, int) and not isinstance(v, bool) and 0 <= v < 2**64  # noqa: E731

FAMILY_PARAMS = {
    Family.KNN: {"k": _POSITIVE_INT, "agg": ("largest", "mean", "median")},
    Family.LOF: {"k": _POSITIVE_INT, "metric": ("euclidean", "manhattan")},
    Family.IFOREST: {"n_trees": _POSITIVE_INT, "subsample": _POSITIVE_INT, "seed": _SEED},
    Family.HBOS: {"n_bins": lambda v: _POSITIVE_INT(v) and v >= 2},
    Family.PCA_RECON: {"var_fraction": _FRACTION},
}


class GridError(ValueError):
    pass


# ---------------------------------------------------------------------------
# grids

def validate_model(model: ModelId) -> None:
    spec = FAMILY_PARAMS[model.family]
    names = [k for k, _ in model.hyperparams]
    if names != list(spec):
        raise GridError(f"{model.family.value}: expected hyperparameters {list(spec)}, got {names}")
    for name, value in model.hyperparams:
        dom = spec[name]
        ok = dom(value) if callable(dom) else value in dom
        if not ok:
            raise GridError(f"{model.family.value}: invalid value {value!r} for {name}")


def expand_grid(grid: dict) -> list[ModelId]:
    """Expand ``{family: {param: [values...]}}`` into ModelIds.

    Families come out in enum order; within a family the cartesian product is
    taken over parameters in the family's declared order, last one fastest.
    """
    if not grid:
        raise GridError("empty grid")
    keyed = {}
    for fam, params in grid.items():
        family = fam if isinstance(fam, Family) else Family(str(fam).lower())
        keyed[family] = params
    models = []
    for family in Family:
        if family not in keyed:
            continue
        params = keyed[family]
        names = list(FAMILY_PARAMS[family])
        unknown = set(params) - set(names)
        if unknown:
            raise GridError(f"{family.value}: unknown hyperparameters {sorted(unknown)}")
        missing = [n for n in names if n not in params]
        if missing:
            raise GridError(f"{family.value}: missing hyperparameters {missing}")
        for combo in itertools.product(*(params[n] for n in names)):
            model = ModelId(family, tuple(zip(names, combo)))
            validate_model(model)
            models.append(model)
    if not models:
        raise GridError("grid expands to no models")
    return models


def build_model_set(grid: dict) -> ModelSet:
    return ModelSet(tuple(expand_grid(grid)))


def load_grid(path=None) -> dict:
    """Read a JSON grid file; ``None`` loads the shipped default grid."""
    if path is None:
        text = resources.files("elect").joinpath("data/default_grid.json").read_text()
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    return raw.get("families", raw)


def default_model_set() -> ModelSet:
    return build_model_set(load_grid())


# ---------------------------------------------------------------------------
# kNN / LOF

def _check_k(D: Dataset, k: int) -> None:
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k >= D.r:
        raise ValueError(f"k={k} must be smaller than the sample count r={D.r}")


def knn_scores(D: Dataset, k: int, agg: str = "largest") -> np.ndarray:
    """Aggregate of the Euclidean distances to the k nearest other points."""
    _check_k(D, k)
    dist, _ = D.neighbors("euclidean")
    near = dist[:, :k]
    if agg == "largest":
        return near[:, -1].copy()
    if agg == "mean":
        return near.mean(axis=1)
    if agg == "median":
        return np.median(near, axis=1)
    raise ValueError(f"unknown kNN aggregation {agg!r}")


def lof_scores(D: Dataset, k: int, metric: str = "euclidean") -> np.ndarray:
    """Local outlier factor over exactly ``k`` nearest neighbors.

    Neighborhood ties are resolved by sample index. Local reachability
    density is capped at ``LRD_CAP`` so zero reachability distances
    (duplicates) stay finite.
    """
    _check_k(D, k)
    if metric not in ("euclidean", "manhattan"):
        raise ValueError(f"unknown LOF metric {metric!r}")
    dist, idx = D.neighbors(metric)
    nd = dist[:, :k]
    ni = idx[:, :k]
    kdist = nd[:, -1]
    reach = np.maximum(kdist[ni], nd)
    mean_reach = reach.mean(axis=1)
    with np.errstate(divide="ignore"):
        lrd = np.where(mean_reach > 0, 1.0 / np.where(mean_reach > 0, mean_reach, 1.0), LRD_CAP)
    lrd = np.minimum(lrd, LRD_CAP)
    return lrd[ni].mean(axis=1) / lrd


# ---------------------------------------------------------------------------
# isolation forest

_EULER_GAMMA = 0.5772156649015329


def average_path_length(n) -> np.ndarray:
    """c(n): mean unsuccessful-search path length in a BST of n points."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    out = np.where(n == 2, 1.0, out)
    big = n > 2
    nb = np.where(big, n, 3.0)
    out = np.where(big, 2.0 * (np.log(nb - 1.0) + _EULER_GAMMA) - 2.0 * (nb - 1.0) / nb, out)
    return out


@numba.njit(cache=True)
def _c_scalar(n):
    if n > 2:
        return 2.0 * (math.log(n - 1.0) + 0.5772156649015329) - 2.0 * (n - 1.0) / n
    if n == 2:
        return 1.0
    return 0.0


@numba.njit(cache=True)
def _grow_tree(X, sample, uniforms, height_limit, feat, thr, left, right, size):
    """Grow one isolation tree on rows ``sample`` of X; returns node count.

    ``uniforms`` supplies two U(0,1) draws per internal node (attribute, cut).
    """
    psi = sample.shape[0]
    d = X.shape[1]
    # node work stack: (node id, start, end, depth) over a permutation buffer
    buf = sample.copy()
    stack_node = np.empty(2 * psi + 2, np.int64)
    stack_lo = np.empty(2 * psi + 2, np.int64)
    stack_hi = np.empty(2 * psi + 2, np.int64)
    stack_depth = np.empty(2 * psi + 2, np.int64)
    candidates = np.empty(d, np.int64)
    mins = np.empty(d)
    maxs = np.empty(d)
    n_nodes = 1
    u_pos = 0
    sp = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = psi
    stack_depth[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        depth = stack_depth[sp]
        cnt = hi - lo
        feat[node] = -1
        size[node] = cnt
        if depth >= height_limit or cnt <= 1:
            continue
        n_cand = 0
        for f in range(d):
            mn = X[buf[lo], f]
            mx = mn
            for t in range(lo + 1, hi):
                v = X[buf[t], f]
                if v < mn:
                    mn = v
                if v > mx:
                    mx = v
            mins[f] = mn
            maxs[f] = mx
            if mx > mn:
                candidates[n_cand] = f
                n_cand += 1
        if n_cand == 0:
            continue
        f = candidates[min(int(uniforms[u_pos] * n_cand), n_cand - 1)]
        cut = mins[f] + uniforms[u_pos + 1] * (maxs[f] - mins[f])
        if cut <= mins[f]:
            cut = mins[f] + 0.5 * (maxs[f] - mins[f])
        u_pos += 2
        # partition buf[lo:hi] into < cut and >= cut
        i = lo
        j = hi - 1
        while i <= j:
            if X[buf[i], f] < cut:
                i += 1
            else:
                tmp = buf[i]
                buf[i] = buf[j]
                buf[j] = tmp
                j -= 1
        feat[node] = f
        thr[node] = cut
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack_node[sp] = n_nodes
        stack_lo[sp] = lo
        stack_hi[sp] = i
        stack_depth[sp] = depth + 1
        sp += 1
        stack_node[sp] = n_nodes + 1
        stack_lo[sp] = i
        stack_hi[sp] = hi
        stack_depth[sp] = depth + 1
        sp += 1
        n_nodes += 2
    return n_nodes


@numba.njit(cache=True)
def _path_lengths(X, feat, thr, left, right, size, out):
    for p in range(X.shape[0]):
        node = 0
        depth = 0
        while feat[node] >= 0:
            if X[p, feat[node]] < thr[node]:
                node = left[node]
            else:
                node = right[node]
            depth += 1
        out[p] += depth + _c_scalar(size[node])


def iforest_scores(D: Dataset, n_trees: int = 100, subsample: int = 256, seed: int = 0) -> np.ndarray:
    """Isolation-forest anomaly score ``2 ** (-E[h(x)] / c(subsample))``."""
    if n_trees < 1:
        raise ValueError("n_trees must be positive")
    if subsample < 1 or subsample > D.r:
        raise ValueError(f"subsample={subsample} must lie in [1, r={D.r}]")
    rng = make_rng(seed)
    X = np.ascontiguousarray(D.X)
    height_limit = int(math.ceil(math.log2(max(subsample, 2))))
    cap = 2 * subsample + 1
    feat = np.empty(cap, np.int64)
    thr = np.empty(cap)
    left = np.empty(cap, np.int64)
    right = np.empty(cap, np.int64)
    size = np.empty(cap, np.int64)
    total = np.zeros(D.r)
    for _ in range(n_trees):
        sample = rng.choice(D.r, size=subsample, replace=False).astype(np.int64)
        uniforms = rng.random(2 * subsample)
        _grow_tree(X, sample, uniforms, height_limit, feat, thr, left, right, size)
        _path_lengths(X, feat, thr, left, right, size, total)
    mean_depth = total / n_trees
    c = float(average_path_length(subsample)) or 1.0
    return np.power(2.0, -mean_depth / c)


# ---------------------------------------------------------------------------
# HBOS / PCA

def hbos_scores(D: Dataset, n_bins: int = 10) -> np.ndarray:
    """Sum over features of ``-log(bin density + eps)``, equal-width bins.

    A constant feature is one bin holding every point (density 1).
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    r = D.r
    score = np.zeros(r)
    for f in range(D.d):
        x = D.X[:, f]
        lo, hi = float(x.min()), float(x.max())
        if hi <= lo:
            dens = np.ones(r)
        else:
            width = (hi - lo) / n_bins
            b = np.floor((x - lo) / width).astype(np.int64)
            b = np.clip(b, 0, n_bins - 1)
            counts = np.bincount(b, minlength=n_bins)
            dens = counts[b] / (r * width)
        score += -np.log(dens + HBOS_EPS)
    return score


def pca_recon_scores(D: Dataset, var_fraction: float = 0.9) -> np.ndarray:
    """Squared reconstruction error from the leading principal components."""
    if D.d < 2:
        raise ValueError("PCA reconstruction needs d >= 2")
    if not 0 < var_fraction < 1:
        raise ValueError("var_fraction must lie in (0, 1)")
    Xc = D.X - D.X.mean(axis=0)
    cov = Xc.T @ Xc / D.r
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0:
        return np.zeros(D.r)
    frac = np.cumsum(evals) / total
    n_comp = int(np.searchsorted(frac, var_fraction - 1e-12) + 1)
    n_comp = min(n_comp, D.d)
    V = evecs[:, :n_comp]
    resid = Xc - (Xc @ V) @ V.T
    return np.einsum("ij,ij->i", resid, resid)


# ---------------------------------------------------------------------------
# dispatch

# instrumented fit counter (read by tests and the selection trace)
FIT_COUNT = 0


def raw_scores(D: Dataset, model: ModelId, seed: int | None = None) -> np.ndarray:
    """Raw family scores; ``seed`` overrides the iForest ModelId seed."""
    p = model.params
    if model.family is Family.KNN:
        return knn_scores(D, p["k"], p["agg"])
    if model.family is Family.LOF:
        return lof_scores(D, p["k"], p["metric"])
    if model.family is Family.IFOREST:
        return iforest_scores(D, p["n_trees"], p["subsample"], p["seed"] if seed is None else seed)
    if model.family is Family.HBOS:
        return hbos_scores(D, p["n_bins"])
    if model.family is Family.PCA_RECON:
        return pca_recon_scores(D, p["var_fraction"])
    raise ValueError(f"unsupported family {model.family}")


def fit_score(D: Dataset, model: ModelId, model_set: ModelSet | None = None, seed: int | None = None) -> np.ndarray:
    """Fit ``model`` on ``D`` and return z-normalized scores (length r)."""
    global FIT_COUNT
    if model_set is not None and model not in model_set:
        raise ValueError(f"{model} is not in the configured model set")
    FIT_COUNT += 1
    return znormalize(raw_scores(D, model, seed))
