import json

import numpy as np
import pytest

from conftest import fast_config
from elect.core import make_rng
from elect.harness import (
    Evaluation,
    MethodResult,
    Outcome,
    TestbedContext as Context,
    compare_methods,
    emit_report,
    loocv_evaluate,
    parse_method,
    render_report,
    rerender_report,
    run_baseline,
    tune_neighbor_count,
)
from elect.metrics import average_precision
from oracles import wilcoxon_exact_oracle


@pytest.fixture(scope="module")
def ctx(small_tasks, tiny_models):
    return Context(small_tasks[:6], tiny_models, 1, 1)


@pytest.fixture(scope="module")
def evaluation(ctx):
    cfg = fast_config(t=3)
    return loocv_evaluate(ctx, config=cfg, methods=["ELECT", "GLOBAL_BEST", "RANDOM", "FIXED_MODEL", "MEGA_ENSEMBLE",
                                                   "DIRECT_IPM_MC"])


def test_one_row_per_dataset(evaluation, ctx, tiny_models):
    m = len(tiny_models)
    for method, res in evaluation.results.items():
        assert [o.dataset for o in res.outcomes] == [t.id for t in ctx.tasks]
        assert all(1 <= o.ap_rank <= m for o in res.outcomes)
    for o in evaluation.results["ELECT"].outcomes:
        ml = ctx.learner(o.dataset, fast_config(t=3))
        assert o.fits <= len(ml.anchors) + 7 + 50


def test_global_best_is_fold_column_mean(evaluation, ctx):
    for o in evaluation.results["GLOBAL_BEST"].outcomes:
        ml = ctx.learner(o.dataset, fast_config(t=3))
        assert o.model == str(ml.model_set[int(np.argmax(ml.P.values.mean(axis=0)))])
        assert o.dataset not in ml.P.dataset_ids


def test_too_few_datasets(small_tasks, tiny_models):
    with pytest.raises(ValueError):
        loocv_evaluate(Context(small_tasks[:6], tiny_models), config=fast_config(), methods=["GLOBAL_BEST"])


def test_random_rank_expectation(ctx, tiny_models):
    ml = ctx.learner(ctx.tasks[0].id, fast_config(t=3))
    ranks = []
    for seed in range(100):
        j, _ = run_baseline("RANDOM", ml, None, score_fn=lambda m: None, seed=seed)
        ranks.append(ctx.P.values[0].argsort()[::-1].tolist().index(j) + 1)
    assert abs(np.mean(ranks) - (len(tiny_models) + 1) / 2) <= 15


def test_baseline_examples(small_ml):
    ml = small_ml
    m = len(ml.model_set)
    rng = make_rng(0)
    base = rng.normal(size=50)
    # a model identical to the lone-anchor consensus gets MC = 1
    scores = {model: rng.normal(size=50) for model in ml.model_set}
    for a in ml.anchors:
        scores[a] = base
    target = ml.model_set[m - 1] if ml.model_set[m - 1] not in ml.anchors else ml.model_set[m - 2]
    scores[target] = base
    j, fits = run_baseline("DIRECT_IPM_MC", ml, None, score_fn=lambda model: scores[model])
    assert ml.model_set[j] in set(ml.anchors) | {target} and fits == m
    ens, _ = run_baseline("MEGA_ENSEMBLE", ml, None, score_fn=lambda model: base)
    labels = (base > 1).astype(int)
    assert average_precision(ens, labels) == average_precision(base, labels)
    j, fits = run_baseline("FIXED_MODEL", ml, None, score_fn=lambda model: base, fixed_model="hbos(n_bins=10)")
    assert str(ml.model_set[j]) == "hbos(n_bins=10)"
    with pytest.raises(ValueError):
        run_baseline("FIXED_MODEL", ml, None, score_fn=lambda model: base, fixed_model="hbos(n_bins=7)")


def test_global_best_dominant_column(small_ml):
    from dataclasses import replace

    from elect.core import PerformanceMatrix

    vals = np.full_like(small_ml.P.values, 0.2)
    vals[:, 3] = 0.9
    ml = replace(small_ml, P=PerformanceMatrix(vals, small_ml.P.dataset_ids, small_ml.model_set))
    assert run_baseline("GLOBAL_BEST", ml, None, score_fn=lambda m: None)[0] == 3


def test_parse_method():
    assert parse_method("random:3") == ("RANDOM", 3)
    assert parse_method("ELECT") == ("ELECT", None)
    with pytest.raises(ValueError):
        parse_method("METAOD")


def _synthetic(ranks_a, ranks_b):
    mk = lambda name, rs: MethodResult(name, [Outcome(f"d{i}", "x", 0.5, r, 0.0, 1) for i, r in enumerate(rs)])  # noqa: E731
    return Evaluation({"A": mk("A", ranks_a), "B": mk("B", ranks_b)})


def test_compare_methods():
    ev = _synthetic([1, 2, 3, 4, 5, 6, 7, 8], [3, 5, 4, 9, 6, 10, 7.5, 12])
    p, direction = compare_methods(ev, "A", "B")
    pairs = [(a.ap_rank, b.ap_rank) for a, b in zip(ev.results["A"].outcomes, ev.results["B"].outcomes)]
    assert p == pytest.approx(wilcoxon_exact_oracle(pairs), abs=1e-12)
    assert direction == -1
    assert compare_methods(ev, "A", "A") == (1.0, 0)


def test_report_files(evaluation, tmp_path):
    files = emit_report(evaluation, tmp_path)
    names = {p.name for p in files}
    assert {"summary.csv", "pairs.csv", "timing.csv", "results.json"} <= names
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert len(rows) == 1 + len(evaluation.results)
    head = rows[0].split(",")
    for row in rows[1:]:
        cells = dict(zip(head, row.split(",")))
        outs = evaluation.results[cells["method"]].outcomes
        assert float(cells["mean_ap_rank"]) == pytest.approx(np.mean([o.ap_rank for o in outs]), abs=1e-15)
    k = len(evaluation.results)
    assert len((tmp_path / "pairs.csv").read_text().splitlines()) == 1 + k * (k - 1) // 2
    trace = json.loads((tmp_path / "traces" / f"{evaluation.results['ELECT'].outcomes[0].dataset}.json").read_text())
    assert trace["records"]


def test_report_rerender_identical(evaluation, tmp_path):
    emit_report(evaluation, tmp_path)
    before = {n: (tmp_path / n).read_bytes() for n in ("summary.csv", "pairs.csv", "timing.csv")}
    for n in before:
        (tmp_path / n).unlink()
    rerender_report(tmp_path)
    assert {n: (tmp_path / n).read_bytes() for n in before} == before


def test_two_methods_summary_rows(evaluation):
    sub = Evaluation({k: evaluation.results[k] for k in ("ELECT", "RANDOM")})
    assert len(render_report(sub)["summary.csv"].splitlines()) == 3


def test_tune_neighbor_count_prefers_twins():
    rng = make_rng(3)
    base = rng.random((3, 12))
    P = np.repeat(base, 2, axis=0) + 1e-3 * rng.random((6, 12))
    # every task has one near-identical twin, so a single neighbor is best
    assert tune_neighbor_count(P, [1, 3, 5]) == 1
    assert tune_neighbor_count(P, [4, 9]) == 4
    with pytest.raises(ValueError):
        tune_neighbor_count(P, [6, 7])


def test_tuned_t_recorded_per_fold(ctx):
    cfg = fast_config(t=3, t_grid=[1, 2, 3])
    ev = loocv_evaluate(ctx, config=cfg, methods=["ELECT"], held_out=[ctx.tasks[0].id])
    fold = ev.folds[ctx.tasks[0].id]
    assert fold["t"] in (1, 2, 3)
    trace = ev.traces[("ELECT", ctx.tasks[0].id)]
    assert all(len(r.neighbors) == fold["t"] for r in trace.records)
