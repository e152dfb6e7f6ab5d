import itertools
import json
import math

import numpy as np
import pytest

from elect import detectors
from elect.core import Dataset, ModelId, make_rng
from elect.detectors import (
    GridError,
    build_model_set,
    expand_grid,
    fit_score,
    hbos_scores,
    iforest_scores,
    knn_scores,
    lof_scores,
    pca_recon_scores,
    raw_scores,
)
from oracles import knn_oracle, lof_oracle


def ds(X, labels=None):
    return Dataset("t", np.asarray(X, dtype=float), labels)


FOUR = [[0, 0], [0, 1], [1, 0], [10, 10]]


def test_knn_four_point_example():
    # (10,10) is nearest to (0,1) and (1,0): sqrt(10**2 + 9**2)
    expected = knn_oracle(np.array(FOUR, dtype=float), 1, "largest")
    np.testing.assert_allclose(expected, [1, 1, 1, math.sqrt(181)], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(knn_scores(ds(FOUR), 1, "largest"), expected)
    np.testing.assert_array_equal(knn_scores(ds(FOUR), 2, "mean"), knn_oracle(np.array(FOUR, dtype=float), 2, "mean"))


def test_knn_duplicates_score_zero():
    s = knn_scores(ds([[1, 1], [1, 1], [5, 5]]), 1, "largest")
    assert s[0] == 0 and s[1] == 0


@pytest.mark.parametrize("agg", ["largest", "mean", "median"])
@pytest.mark.parametrize("seed", range(5))
def test_knn_matches_brute_force(agg, seed):
    rng = make_rng(seed)
    X = rng.normal(size=(int(rng.integers(10, 51)), 3))
    for k in (1, 2, 5, 9):
        np.testing.assert_array_equal(knn_scores(ds(X), k, agg), knn_oracle(X, k, agg))


@pytest.mark.parametrize("metric", ["euclidean", "manhattan"])
@pytest.mark.parametrize("seed", range(5))
def test_lof_matches_definition(metric, seed):
    rng = make_rng(100 + seed)
    X = rng.normal(size=(int(rng.integers(10, 51)), 2))
    X[:3] = X[3]  # duplicates exercise the density cap
    for k in (2, 3, 7):
        np.testing.assert_allclose(lof_scores(ds(X), k, metric), lof_oracle(X, k, metric), rtol=1e-9, atol=1e-9)


def test_lof_uniform_grid_interior_near_one():
    g = np.array(list(itertools.product(range(10), range(10))), dtype=float)
    s = lof_scores(ds(g), 8, "euclidean")
    interior = [i for i, (a, b) in enumerate(g) if 2 <= a <= 7 and 2 <= b <= 7]
    assert np.all(np.abs(s[interior] - 1) < 0.15)


def test_lof_far_point_is_max():
    X = [[0, 0], [0, 1], [1, 0], [1, 1], [8, 8]]
    s = lof_scores(ds(X), 2, "euclidean")
    assert int(np.argmax(s)) == 4


def test_lof_identical_points():
    s = lof_scores(ds(np.ones((6, 2))), 2, "manhattan")
    np.testing.assert_array_equal(s, np.ones(6))


def test_k_must_be_below_r():
    with pytest.raises(ValueError):
        knn_scores(ds(FOUR), 4)
    with pytest.raises(ValueError):
        lof_scores(ds(FOUR), 4)


def test_iforest_extreme_outlier_ranks_first():
    rng = make_rng(5)
    X = np.vstack([rng.normal(scale=0.1, size=(63, 2)), [[5.0, 5.0]]])
    s = iforest_scores(ds(X), 100, 64, seed=1)
    assert int(np.argmax(s)) == 63
    assert np.all((s > 0) & (s < 1))


def test_iforest_seeded_determinism():
    X = make_rng(1).normal(size=(120, 3))
    a = iforest_scores(ds(X), 50, 64, seed=9)
    b = iforest_scores(ds(X), 50, 64, seed=9)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, iforest_scores(ds(X), 50, 64, seed=10))


def test_iforest_more_trees_less_variance():
    X = make_rng(2).normal(size=(100, 2))
    one = np.array([iforest_scores(ds(X), 1, 64, seed=s) for s in range(20)])
    many = np.array([iforest_scores(ds(X), 200, 64, seed=s) for s in range(20)])
    assert one.var(axis=0).mean() > many.var(axis=0).mean()


def test_iforest_subsample_bound():
    with pytest.raises(ValueError):
        iforest_scores(ds(make_rng(0).normal(size=(10, 2))), 10, 64, seed=0)


def test_hbos_far_point_maximal():
    X = np.array([[float(v)] for v in list(range(10)) + [100]])
    s = hbos_scores(ds(X), 5)
    assert int(np.argmax(s)) == 10


def test_hbos_densest_bin_is_minimal():
    X = np.array([[0.0, 0.0]] * 6 + [[1.0, 5.0], [2.0, 9.0], [3.0, 3.0]])
    s = hbos_scores(ds(X), 3)
    assert np.all(s[:6] == s.min())


def test_hbos_constant_feature_is_uniform():
    rng = make_rng(4)
    X = np.column_stack([rng.normal(size=30), np.full(30, 2.0)])
    base = hbos_scores(ds(X[:, :1]), 10)
    np.testing.assert_allclose(hbos_scores(ds(X), 10) - base, np.full(30, (hbos_scores(ds(X), 10) - base)[0]))


def test_pca_line_plus_offline_point():
    X = np.array([[t, 2 * t] for t in np.linspace(-3, 3, 20)] + [[1.0, -1.0]])
    # the off-line point tilts the fit slightly, so compare against the dominant error
    s = pca_recon_scores(ds(X), 0.9)
    assert int(np.argmax(s)) == 20
    Y = np.array([[t, 2 * t] for t in np.linspace(-3, 3, 20)])
    np.testing.assert_allclose(pca_recon_scores(ds(Y), 0.9), 0, atol=1e-20 + 1e-12)


def test_pca_full_rank_zero_error():
    X = make_rng(3).normal(size=(40, 3))
    np.testing.assert_allclose(pca_recon_scores(ds(X), 0.999999), 0, atol=1e-9)


def test_pca_matches_svd_oracle():
    rng = make_rng(8)
    X = rng.normal(size=(60, 3)) @ np.array([[3, 0, 0], [1, 1, 0], [0, 0.2, 0.3]])
    Xc = X - X.mean(axis=0)
    _, sv, Vt = np.linalg.svd(Xc, full_matrices=False)
    ratio = np.cumsum(sv**2) / np.sum(sv**2)
    for frac in (0.5, 0.7, 0.9):
        k = int(np.searchsorted(ratio, frac - 1e-12) + 1)
        V = Vt[:k].T
        err = np.sum((Xc - Xc @ V @ V.T) ** 2, axis=1)
        np.testing.assert_allclose(pca_recon_scores(ds(X), frac), err, atol=1e-8)


def test_pca_rank_zero_is_all_zero():
    assert np.all(pca_recon_scores(ds(np.ones((5, 3))), 0.9) == 0)


def test_grid_counts():
    grid = {"knn": {"k": [3, 5], "agg": ["mean"]}}
    assert len(build_model_set(grid)) == 2
    assert len(detectors.default_model_set()) == 61
    with pytest.raises(GridError):
        build_model_set({})
    with pytest.raises(GridError):
        build_model_set({"knn": {"k": [0], "agg": ["mean"]}})


def test_grid_order_is_family_then_product():
    grid = {"lof": {"k": [3], "metric": ["euclidean", "manhattan"]}, "knn": {"k": [3, 5], "agg": ["mean"]}}
    names = [str(m) for m in expand_grid(grid)]
    assert names == ["knn(k=3,agg=mean)", "knn(k=5,agg=mean)", "lof(k=3,metric=euclidean)", "lof(k=3,metric=manhattan)"]


def test_load_grid_from_file(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps({"families": {"hbos": {"n_bins": [5, 10]}}}))
    assert len(build_model_set(detectors.load_grid(p))) == 2


def test_fit_score_properties():
    rng = make_rng(6)
    X = rng.normal(size=(260, 3))
    D = ds(X)
    perm = rng.permutation(260)
    Dp = ds(X[perm])
    for model in detectors.default_model_set():
        s = fit_score(D, model)
        assert s.shape == (260,) and np.all(np.isfinite(s))
        assert abs(s.mean()) < 1e-9 and (abs(s.std() - 1) < 1e-9 or np.all(s == 0))
        assert np.array_equal(s, fit_score(D, model))
        if not model.stochastic:
            np.testing.assert_allclose(fit_score(Dp, model), s[perm], atol=1e-9)


def test_fit_score_rejects_foreign_model():
    ms = build_model_set({"hbos": {"n_bins": [5]}})
    with pytest.raises(ValueError):
        fit_score(ds(make_rng(0).normal(size=(20, 2))), ModelId.of("hbos", n_bins=10), ms)


def test_fit_counter_increments():
    before = detectors.FIT_COUNT
    fit_score(ds(make_rng(0).normal(size=(20, 2))), ModelId.of("hbos", n_bins=5))
    assert detectors.FIT_COUNT == before + 1
    raw_scores(ds(make_rng(0).normal(size=(20, 2))), ModelId.of("hbos", n_bins=5))
    assert detectors.FIT_COUNT == before + 1
