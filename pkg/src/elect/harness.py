"""LOOCV evaluation, baselines, statistical comparison, and report files."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import detectors
from .config import Config
from .core import Dataset, ModelId, ModelSet, derive_seed, format_float, make_rng, znormalize
from .ipm import TaskIpmCache, compute_ipms
from .metatrain import MetaLearner, compute_performance_matrix, meta_train
from .metrics import WilcoxonError, ap_ranks, average_precision, virtual_rank, wilcoxon_signed_rank
from .select import SelectionTrace, adaptive_select, select_from_neighbors
from .similarity import performance_tau

log = logging.getLogger(__name__)

BASELINES = ("FIXED_MODEL", "GLOBAL_BEST", "RANDOM", "MEGA_ENSEMBLE",
             "DIRECT_IPM_MC", "DIRECT_IPM_SELECT", "DIRECT_IPM_HITS")
ELECT_VARIANTS = ("ELECT", "ELECT_SUM", "ELECT_GREEDY", "ELECT_RANDOM_INIT")
DEFAULT_METHODS = ("ELECT", "GLOBAL_BEST", "RANDOM", "FIXED_MODEL")


@dataclass
class Outcome:
    """One method's result on one held-out dataset."""

    dataset: str
    model: str
    ap: float
    ap_rank: float
    seconds: float
    fits: int


@dataclass
class MethodResult:
    method: str
    outcomes: list[Outcome] = field(default_factory=list)

    def by_dataset(self) -> dict[str, Outcome]:
        return {o.dataset: o for o in self.outcomes}

    @property
    def mean_ap_rank(self) -> float:
        return float(np.mean([o.ap_rank for o in self.outcomes]))


@dataclass
class Evaluation:
    results: dict[str, MethodResult]
    traces: dict[tuple[str, str], SelectionTrace] = field(default_factory=dict)
    folds: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "results": {m: [asdict(o) for o in r.outcomes] for m, r in sorted(self.results.items())},
            "folds": self.folds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Evaluation":
        results = {m: MethodResult(m, [Outcome(**o) for o in rows]) for m, rows in d["results"].items()}
        return cls(results, {}, d.get("folds", {}))


class TestbedContext:
    """Fold-independent work for a testbed: scores, full AP matrix, IPM caches."""

    def __init__(self, tasks: Sequence[Dataset], model_set: ModelSet, trials: int = 1, jobs: int | None = 1):
        self.tasks = list(tasks)
        self.model_set = model_set
        self.P, self.scores = compute_performance_matrix(self.tasks, model_set, trials, jobs)
        self.ipm_caches = {t.id: TaskIpmCache(self.scores[t.id]) for t in self.tasks}
        self.memo: dict = {}
        self.learners: dict[tuple, MetaLearner] = {}

    def index(self, dataset_id: str) -> int:
        return self.P.dataset_ids.index(dataset_id)

    def learner(self, held_out: str, config: Config) -> MetaLearner:
        """Meta-learner trained on every task except ``held_out`` (memoized)."""
        key = (held_out, json.dumps(_train_keys(config), sort_keys=True))
        if key not in self.learners:
            train = [t for t in self.tasks if t.id != held_out]
            self.learners[key] = meta_train(train, self.model_set, config, score_cache=self.scores,
                                            ipm_caches=self.ipm_caches, memo=self.memo)
        return self.learners[key]


def _train_keys(config: Config) -> dict:
    d = config.to_dict()
    return {k: d[k] for k in ("t", "init_size", "patience", "budget", "max_anchors", "anchor_pool",
                              "anchor_tol", "anchor_pair_models", "k_folds", "anchor_params", "predictor_grid")}


def parse_method(method: str) -> tuple[str, int | None]:
    name, _, arg = method.partition(":")
    name = name.strip().upper()
    if name not in BASELINES + ELECT_VARIANTS:
        raise ValueError(f"unknown method {method!r}")
    return name, int(arg) if arg else None


# ---------------------------------------------------------------------------
# baselines

def run_baseline(kind: str, ml: MetaLearner, D_test: Dataset | None, *,
                 score_fn: Callable[[ModelId], np.ndarray] | None = None, seed: int = 0,
                 fixed_model: str | ModelId | None = None):
    """Run a non-adaptive baseline on the unlabeled test task.

    Returns ``(model_index, fits)`` for selectors, or ``(ensemble_scores,
    fits)`` for ``MEGA_ENSEMBLE``.
    """
    kind = kind.upper()
    models = ml.model_set
    if score_fn is None:
        if D_test is None:
            raise ValueError("need a dataset or a score function")
        score_fn = lambda model: detectors.fit_score(D_test, model)  # noqa: E731
    if D_test is not None and D_test.labels is not None:
        raise ValueError("baselines take an unlabeled dataset")
    if kind == "FIXED_MODEL":
        model = fixed_model if isinstance(fixed_model, ModelId) else ModelId.parse(fixed_model or Config().fixed_model)
        if model not in models:
            raise ValueError(f"fixed model {model} is not in the model set")
        return models.index(model), 1
    if kind == "GLOBAL_BEST":
        return int(np.argmax(ml.P.values.mean(axis=0))), 0
    if kind == "RANDOM":
        return int(make_rng(seed).integers(len(models))), 1
    all_scores = [np.asarray(score_fn(mdl), dtype=np.float64) for mdl in models]
    if kind == "MEGA_ENSEMBLE":
        return np.mean([znormalize(s) for s in all_scores], axis=0), len(models)
    if kind.startswith("DIRECT_IPM_"):
        col = {"DIRECT_IPM_MC": 0, "DIRECT_IPM_SELECT": 1, "DIRECT_IPM_HITS": 2}[kind]
        anchors = {models[a]: all_scores[a] for a in ml.anchor_indices}
        vals = [compute_ipms(models[j], all_scores[j], anchors).as_array()[col] for j in range(len(models))]
        return int(np.argmax(vals)), len(models)
    raise ValueError(f"unknown baseline {kind!r}")


# ---------------------------------------------------------------------------
# LOOCV

def tune_neighbor_count(P, candidates: Sequence[int]) -> int:
    """Pick the neighbor count by leave-one-out over the meta-train tasks.

    Each task in turn plays the test task: its neighbors are the others ranked
    by ground-truth similarity, and the candidate with the lowest mean
    AP-rank of the resulting selection wins (smallest on ties).
    """
    Pv = np.asarray(getattr(P, "values", P), dtype=np.float64)
    n = len(Pv)
    usable = sorted({int(c) for c in candidates if 1 <= c < n})
    if not usable:
        raise ValueError("no candidate neighbor count fits the meta-train size")
    sims = np.array([[performance_tau(Pv[i], Pv[k]) if i != k else -np.inf for k in range(n)] for i in range(n)])
    mean_rank = {}
    for c in usable:
        ranks = []
        for i in range(n):
            order = np.argsort(-sims[i], kind="stable")[:c]
            ranks.append(ap_ranks(Pv[i])[select_from_neighbors(Pv, order)])
        mean_rank[c] = float(np.mean(ranks))
    return min(usable, key=lambda c: (mean_rank[c], c))


def loocv_evaluate(testbed: Sequence[Dataset] | TestbedContext, grid=None, config: Config | None = None,
                   methods: Iterable[str] = DEFAULT_METHODS, *, held_out: Sequence[str] | None = None) -> Evaluation:
    """Leave-one-out evaluation of ``methods`` across the testbed.

    Each held-out task is handed to selection without labels; its labels
    only score the selected model afterwards.
    """
    config = config or Config()
    methods = list(methods)
    parsed = [parse_method(m) for m in methods]
    if isinstance(testbed, TestbedContext):
        ctx = testbed
    else:
        model_set = grid if isinstance(grid, ModelSet) else detectors.build_model_set(grid or detectors.load_grid(config.grid))
        ctx = TestbedContext(testbed, model_set, config.trials, config.jobs)
    if len(ctx.tasks) < config.t + 2:
        raise ValueError(f"LOOCV needs at least t+2={config.t + 2} datasets, got {len(ctx.tasks)}")
    results = {m: MethodResult(m) for m in methods}
    ev = Evaluation(results)
    ids = [t.id for t in ctx.tasks] if held_out is None else list(held_out)
    for fold, dsid in enumerate(ids):
        k = ctx.index(dsid)
        task = ctx.tasks[k]
        D_test = task.unlabeled()
        ap_row = ctx.P.values[k]
        ranks = ap_ranks(ap_row)
        t0 = time.perf_counter()
        ml = ctx.learner(dsid, config)
        train_seconds = time.perf_counter() - t0
        t = tune_neighbor_count(ml.P, config.t_grid) if config.t_grid else config.t
        ev.folds[dsid] = {"anchors": [str(a) for a in ml.anchors], "predictor_params": ml.info.get("predictor_params"),
                          "anchor_mse": ml.info.get("anchor_mse"), "train_seconds": train_seconds, "t": t}
        scores = ctx.scores[dsid]

        def score_fn(model, _s=scores):
            return _s[ctx.model_set.index(model)]

        for method, (name, arg) in zip(methods, parsed):
            seed = derive_seed(config.seed if arg is None else arg, fold, sum(map(ord, name)))
            t1 = time.perf_counter()
            if name in ELECT_VARIANTS:
                kind = {"ELECT_SUM": "sum", "ELECT_GREEDY": "greedy"}.get(name, config.acquisition)
                init = "random" if name == "ELECT_RANDOM_INIT" else config.init
                model, trace = adaptive_select(
                    D_test, ml, config.budget, config.patience, kind, t=t, init=init,
                    strict_coverage=config.coverage == "strict", seed=seed, score_fn=score_fn, eval_ap=ap_row,
                )
                j = ctx.model_set.index(model)
                ev.traces[(method, dsid)] = trace
                out = Outcome(dsid, str(model), float(ap_row[j]), float(ranks[j]), 0.0, trace.n_fitted)
            else:
                res, fits = run_baseline(name, ml, D_test, score_fn=score_fn, seed=seed, fixed_model=config.fixed_model)
                if name == "MEGA_ENSEMBLE":
                    ap = average_precision(res, task.labels)
                    out = Outcome(dsid, "mega_ensemble", ap, virtual_rank(ap_row, ap), 0.0, fits)
                else:
                    out = Outcome(dsid, str(ctx.model_set[res]), float(ap_row[res]), float(ranks[res]), 0.0, fits)
            out.seconds = time.perf_counter() - t1
            results[method].outcomes.append(out)
        log.info("fold %s done", dsid)
    return ev


def neighbor_similarity(trace: SelectionTrace, test_row, P, iteration: int) -> float:
    """Mean ground-truth weighted tau between the test task and the neighbors
    recorded at ``iteration`` (1-based; -1 for the last)."""
    rec = trace.records[iteration - 1 if iteration > 0 else iteration]
    return float(np.mean([performance_tau(test_row, P.row(d)) for d in rec.neighbors]))


# ---------------------------------------------------------------------------
# comparison and reports

def compare_methods(ev: Evaluation | dict, method_a: str, method_b: str) -> tuple[float, int]:
    """Paired Wilcoxon on AP-ranks; direction is the sign of median(a - b).

    A negative direction means ``method_a`` ranks better. Pairs with too few
    non-zero differences yield ``(1.0, direction)``: no detectable difference.
    """
    results = ev.results if isinstance(ev, Evaluation) else ev
    a = results[method_a].by_dataset()
    b = results[method_b].by_dataset()
    if set(a) != set(b):
        raise ValueError("methods were evaluated on different datasets")
    keys = sorted(a)
    pairs = np.array([(a[k].ap_rank, b[k].ap_rank) for k in keys]).reshape(-1, 2)
    direction = int(np.sign(np.median(pairs[:, 0] - pairs[:, 1]))) if len(pairs) else 0
    try:
        _, p = wilcoxon_signed_rank(pairs)
    except WilcoxonError:
        return 1.0, direction
    return p, direction


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def render_report(ev: Evaluation) -> dict[str, str]:
    methods = sorted(ev.results)
    summary = [["method", "n_datasets", "mean_ap_rank", "mean_ap", "mean_fits"]]
    timing = [["method", "mean_seconds"]]
    for m in methods:
        outs = ev.results[m].outcomes
        summary.append([m, len(outs), format_float(np.mean([o.ap_rank for o in outs])),
                        format_float(np.mean([o.ap for o in outs])), format_float(np.mean([o.fits for o in outs]))])
        timing.append([m, format_float(np.mean([o.seconds for o in outs]))])
    pairs = [["method_a", "method_b", "p_value", "direction"]]
    for a, b in itertools.combinations(methods, 2):
        p, d = compare_methods(ev, a, b)
        pairs.append([a, b, format_float(p), d])
    return {"summary.csv": _csv(summary), "timing.csv": _csv(timing), "pairs.csv": _csv(pairs)}


def emit_report(ev: Evaluation, directory) -> list[Path]:
    """Write summary/pairs/timing CSVs, ``results.json`` and per-dataset traces."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in render_report(ev).items():
        (directory / name).write_text(text)
        written.append(directory / name)
    (directory / "results.json").write_text(json.dumps(ev.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(directory / "results.json")
    for (method, dsid), trace in sorted(ev.traces.items()):
        sub = directory / "traces" if method == "ELECT" else directory / "traces" / method.replace(":", "_")
        sub.mkdir(parents=True, exist_ok=True)
        (sub / f"{dsid}.json").write_text(trace.to_json())
        written.append(sub / f"{dsid}.json")
    return written


def rerender_report(directory) -> list[Path]:
    """Regenerate summary/pairs/timing from a persisted ``results.json``."""
    directory = Path(directory)
    ev = Evaluation.from_dict(json.loads((directory / "results.json").read_text()))
    written = []
    for name, text in render_report(ev).items():
        (directory / name).write_text(text)
        written.append(directory / name)
    return written
