import json

import numpy as np
import pytest

from elect import predictor
from elect.core import make_rng
from elect.ipm import IpmVector
from elect.predictor import (
    GbtModel,
    PairData,
    PairSample,
    build_training_pairs,
    cv_tune_predictor,
    fit_gbt,
    predict_gap,
    predict_gaps,
    task_folds,
)


def pair_data(n=6, m=8, seed=0):
    rng = make_rng(seed)
    ipms = rng.random((n, m, 3))
    # performance loosely follows the first IPM so there is signal to learn
    P = np.clip(0.5 * ipms[:, :, 0] + 0.3 * rng.random((n, m)), 0, 1)
    return ipms, P


def test_pair_count_and_mirror():
    ipms, P = pair_data(2, 3)
    data = build_training_pairs(ipms, P)
    assert len(data) == 12
    rows = {tuple(x): y for x, y in zip(data.X, data.y)}
    for x, y in rows.items():
        assert rows[x[3:] + x[:3]] == -y
    assert np.all(np.abs(data.y) <= 1)


def test_pairs_reject_missing_ipms():
    ipms, P = pair_data(2, 3)
    with pytest.raises(ValueError):
        build_training_pairs(ipms[:, :2], P)
    bad = ipms.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        build_training_pairs(bad, P)


def test_model_subset_pairs():
    ipms, P = pair_data(2, 5)
    sub = build_training_pairs(ipms, P, [0, 2, 4])
    assert len(sub) == 2 * 2 * 3
    full = build_training_pairs(ipms, P, range(5))
    assert np.array_equal(full.X, build_training_pairs(ipms, P).X)


def test_constant_target():
    X = make_rng(1).random((50, 6))
    model = fit_gbt(X, np.full(50, 0.3), n_trees=5, min_leaf=1)
    np.testing.assert_allclose(model.predict(X), 0.3, atol=1e-15)


def test_step_function():
    x = np.linspace(-1, 1, 101)
    y = (x > 0).astype(float)
    model = fit_gbt(x[:, None], y, n_trees=10, max_depth=1, learning_rate=0.5, min_leaf=1)
    assert np.mean((model.predict(x[:, None]) - y) ** 2) < 1e-3


def test_duplicating_samples_keeps_model():
    rng = make_rng(2)
    X = rng.random((80, 6))
    y = X[:, 0] - X[:, 3] + 0.1 * rng.normal(size=80)
    a = fit_gbt(X, y, n_trees=20, max_depth=3, min_leaf=1)
    b = fit_gbt(np.vstack([X, X]), np.concatenate([y, y]), n_trees=20, max_depth=3, min_leaf=1)
    assert all(s.same_as(t, atol=1e-12) for s, t in zip(a.trees, b.trees))


def test_refit_is_bit_identical_and_order_free():
    ipms, P = pair_data()
    data = build_training_pairs(ipms, P)
    a = fit_gbt(data, n_trees=30, max_depth=3, min_leaf=5)
    b = fit_gbt(data, n_trees=30, max_depth=3, min_leaf=5)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    perm = make_rng(3).permutation(len(data))
    c = fit_gbt(data.X[perm], data.y[perm], n_trees=30, max_depth=3, min_leaf=5)
    assert json.dumps(a.to_dict()) == json.dumps(c.to_dict())


def test_sorted_scan_matches_grouped(monkeypatch):
    ipms, P = pair_data()
    data = build_training_pairs(ipms, P)
    a = fit_gbt(data, n_trees=15, max_depth=3, min_leaf=5)
    monkeypatch.setattr(predictor, "GROUPED_TABLE_LIMIT", 0)
    b = fit_gbt(data, n_trees=15, max_depth=3, min_leaf=5)
    np.testing.assert_allclose(a.predict(data.X), b.predict(data.X), atol=1e-12)


def test_structure_bounds():
    ipms, P = pair_data()
    model = fit_gbt(build_training_pairs(ipms, P), n_trees=7, max_depth=2, min_leaf=3)
    assert len(model.trees) == 7
    assert all(len(t.feature) <= 2**3 - 1 for t in model.trees)


def test_pair_samples_accepted():
    samples = [PairSample((float(i),) * 6, float(i % 2)) for i in range(10)]
    assert len(fit_gbt(samples, n_trees=2, min_leaf=1).trees) == 2
    with pytest.raises(ValueError):
        fit_gbt([PairSample((0.0,) * 6, 1.0)])


def test_antisymmetry_exact():
    ipms, P = pair_data()
    model = fit_gbt(build_training_pairs(ipms, P), n_trees=20, max_depth=3, min_leaf=2)
    rng = make_rng(4)
    for _ in range(50):
        a, b = rng.random(3), rng.random(3)
        assert predict_gap(model, a, a) == 0.0
        assert predict_gap(model, a, b) == -predict_gap(model, b, a)
        assert -1 <= predict_gap(model, a, b) <= 1
    va = IpmVector(0.1, 0.2, 0.3)
    assert predict_gap(model, va, va) == 0.0


def test_serialization_roundtrip():
    ipms, P = pair_data()
    model = fit_gbt(build_training_pairs(ipms, P), n_trees=10, max_depth=3, min_leaf=2)
    back = GbtModel.from_dict(json.loads(json.dumps(model.to_dict())))
    X = make_rng(5).random((30, 6))
    assert np.array_equal(back.predict(X), model.predict(X))


def test_task_folds_split_by_task():
    folds = task_folds(np.array([3, 3, 1, 2, 2, 0]), 2)
    assert [f.tolist() for f in folds] == [[0, 2], [1, 3]]
    with pytest.raises(ValueError):
        task_folds(np.array([0, 0, 1]), 3)


def test_cv_tune_single_and_dominant():
    ipms, P = pair_data(6, 8)
    data = build_training_pairs(ipms, P)
    one = {"n_trees": 5, "max_depth": 2, "learning_rate": 0.1, "min_leaf": 5, "seed": 0}
    assert cv_tune_predictor(data, [one], 3) == one
    useless = {"n_trees": 1, "max_depth": 1, "learning_rate": 1e-9, "min_leaf": 5, "seed": 0}
    good = {"n_trees": 40, "max_depth": 3, "learning_rate": 0.1, "min_leaf": 5, "seed": 0}
    assert cv_tune_predictor(data, [useless, good], 3) == good
    with pytest.raises(ValueError):
        cv_tune_predictor(data, [], 3)
