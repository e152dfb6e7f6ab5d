"""Offline phase: performance matrix, anchor selection, IPMs, predictor, bundle I/O."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import detectors
from .config import Config
from .core import Dataset, ModelId, ModelSet, PerformanceMatrix, derive_seed, format_float
from .ipm import AnchorSet, TaskIpmCache
from .metrics import average_precision
from .predictor import GbtModel, PairData, build_training_pairs, cv_fold_mse, cv_tune_predictor, fit_gbt

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class BundleError(Exception):
    pass


class ChecksumError(BundleError):
    pass


class VersionError(BundleError):
    pass


# ---------------------------------------------------------------------------
# scores and performance

def trial_seed(model: ModelId, trial: int) -> int | None:
    if trial == 0 or not model.stochastic:
        return None
    return derive_seed(model.params["seed"], trial)


def _score_task(task: Dataset, models: ModelSet, trials: int):
    scores = np.empty((len(models), task.r))
    ap = np.empty(len(models))
    for j, model in enumerate(models):
        scores[j] = detectors.fit_score(task, model)
        vals = [average_precision(scores[j], task.labels)]
        if model.stochastic:
            for k in range(1, trials):
                s = detectors.fit_score(task, model, seed=trial_seed(model, k))
                vals.append(average_precision(s, task.labels))
        ap[j] = float(np.mean(vals))
    return scores, ap


def compute_performance_matrix(tasks: Sequence[Dataset], models: ModelSet, trials: int = 1,
                               jobs: int | None = 1) -> tuple[PerformanceMatrix, dict[str, np.ndarray]]:
    """AP of every model on every task, plus the ``m x r`` score matrix per task.

    Stochastic families are averaged over ``trials`` re-seeded fits; the
    cached scores are those of the ModelId's own seed.
    """
    for t in tasks:
        t.check_trainable()
    if jobs is None:
        jobs = os.cpu_count() or 1
    if jobs > 1 and len(tasks) > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=jobs)(delayed(_score_task)(t, models, trials) for t in tasks)
        # fits happened in worker processes
        detectors.FIT_COUNT += sum(len(models) + (trials - 1) * sum(m.stochastic for m in models) for _ in tasks)
    else:
        results = [_score_task(t, models, trials) for t in tasks]
    cache = {t.id: s for t, (s, _) in zip(tasks, results)}
    P = PerformanceMatrix(np.vstack([ap for _, ap in results]), tuple(t.id for t in tasks), models)
    return P, cache


def performance_from_scores(score_cache: Mapping[str, np.ndarray], tasks: Sequence[Dataset],
                            models: ModelSet) -> PerformanceMatrix:
    """Recompute P from cached scores and labels (single trial)."""
    rows = [[average_precision(score_cache[t.id][j], t.labels) for j in range(len(models))] for t in tasks]
    return PerformanceMatrix(np.array(rows), tuple(t.id for t in tasks), models)


# ---------------------------------------------------------------------------
# anchors

def anchor_pool(m: int, size: int) -> list[int]:
    """Evenly spaced candidate indices across the model list."""
    if size >= m:
        return list(range(m))
    return sorted({int(round(x)) for x in np.linspace(0, m - 1, size)})


def anchor_pair_models(m: int, size: int) -> list[int] | None:
    """Evenly spaced models whose pairs score anchor candidates (all if ``size >= m``)."""
    if size >= m:
        return None
    return sorted({int(round(x)) for x in np.linspace(0, m - 1, size)})


def ipm_tensor(caches: Sequence[TaskIpmCache], anchors: Sequence[int], memo: dict | None = None) -> np.ndarray:
    """``n x m x 3`` IPMs for every task against the anchor indices."""
    out = []
    for c in caches:
        key = (id(c), tuple(anchors))
        if memo is not None and key in memo:
            out.append(memo[key])
            continue
        v = c.ipms(anchors)
        if memo is not None:
            memo[key] = v
        out.append(v)
    return np.stack(out)


def anchor_cv_mse(caches, P: np.ndarray, anchors, params: dict, k_folds: int, memo=None,
                  models: Sequence[int] | None = None) -> float:
    data = build_training_pairs(ipm_tensor(caches, anchors, memo), P, models)
    return float(np.mean(cv_fold_mse(data, params, k_folds)))


@dataclass
class AnchorSelection:
    anchors: list[int]
    mse_history: list[float]


def forward_select_anchors(caches: Sequence[TaskIpmCache], P, *, max_anchors: int = 8, k_folds: int = 3,
                           pool: Sequence[int] | None = None, params: dict | None = None,
                           tol: float = 0.01, memo: dict | None = None,
                           models: Sequence[int] | None = None) -> AnchorSelection:
    """Greedy forward selection of anchor models by predictor CV MSE.

    Each step tries every remaining pool candidate, keeps the one with the
    lowest task-fold MSE, and stops once the relative improvement drops
    below ``tol`` or ``max_anchors`` is reached. Ties go to the lower index.
    ``models`` restricts the scoring pairs to a model subset to save time.
    """
    if max_anchors < 1:
        raise ValueError("max_anchors must be >= 1")
    Pv = np.asarray(getattr(P, "values", P), dtype=np.float64)
    m = Pv.shape[1]
    pool = list(range(m)) if pool is None else sorted(int(j) for j in pool)
    params = dict(params or {})
    chosen: list[int] = []
    history: list[float] = []
    while len(chosen) < max_anchors:
        best_j, best_mse = None, math.inf
        for j in pool:
            if j in chosen:
                continue
            mse = anchor_cv_mse(caches, Pv, chosen + [j], params, k_folds, memo, models)
            if mse < best_mse:
                best_j, best_mse = j, mse
        if best_j is None:
            break
        if history and (history[-1] - best_mse) < tol * history[-1]:
            break
        chosen.append(best_j)
        history.append(best_mse)
        log.debug("anchor step %d: +%d mse=%.6g", len(chosen), best_j, best_mse)
    return AnchorSelection(chosen, history)


# ---------------------------------------------------------------------------
# bundle

@dataclass(eq=False)
class MetaLearner:
    model_set: ModelSet
    anchors: AnchorSet
    P: PerformanceMatrix
    ipms: np.ndarray
    predictor: GbtModel
    hyperparams: dict
    format_version: int = FORMAT_VERSION
    grid: dict | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(a not in self.model_set for a in self.anchors):
            raise ValueError("anchors must be drawn from the model set")
        if self.ipms.shape != (self.P.n, self.P.m, 3) or not np.all(np.isfinite(self.ipms)):
            raise ValueError("IPMs must cover every (task, model)")
        for k in ("t", "init_size", "patience", "budget"):
            if int(self.hyperparams.get(k, 0)) < 1:
                raise ValueError(f"hyperparameter {k} must be positive")
        if self.hyperparams["t"] > self.P.n:
            raise ValueError("t must not exceed the number of meta-train tasks")

    @property
    def anchor_indices(self) -> list[int]:
        return [self.model_set.index(a) for a in self.anchors]


def meta_train(tasks: Sequence[Dataset], grid, config: Config | None = None, *,
               score_cache: Mapping[str, np.ndarray] | None = None,
               ipm_caches: Mapping[str, TaskIpmCache] | None = None,
               memo: dict | None = None) -> MetaLearner:
    """Run the offline phase on labeled ``tasks``.

    ``grid`` is a grid dict or a ready :class:`ModelSet`. ``score_cache`` /
    ``ipm_caches`` let LOOCV folds reuse fold-independent work.
    """
    config = config or Config()
    if len(tasks) < config.t + 1:
        raise ValueError(f"need at least t+1={config.t + 1} meta-train tasks, got {len(tasks)}")
    model_set = grid if isinstance(grid, ModelSet) else detectors.build_model_set(grid)
    grid_dict = None if isinstance(grid, ModelSet) else grid
    if score_cache is None:
        P, score_cache = compute_performance_matrix(tasks, model_set, config.trials, config.jobs)
    else:
        for t in tasks:
            t.check_trainable()
        P = performance_from_scores(score_cache, tasks, model_set)
    if ipm_caches is None:
        ipm_caches = {t.id: TaskIpmCache(score_cache[t.id]) for t in tasks}
    caches = [ipm_caches[t.id] for t in tasks]

    k_folds = min(config.k_folds, len(tasks))
    sel = forward_select_anchors(
        caches, P, max_anchors=config.max_anchors, k_folds=k_folds,
        pool=anchor_pool(len(model_set), config.anchor_pool), params=config.anchor_params,
        tol=config.anchor_tol, memo=memo, models=anchor_pair_models(len(model_set), config.anchor_pair_models),
    )
    ipms = ipm_tensor(caches, sel.anchors, memo)
    data = build_training_pairs(ipms, P)
    params = cv_tune_predictor(data, config.predictor_grid, k_folds)
    predictor = fit_gbt(data, **params)
    return MetaLearner(
        model_set=model_set,
        anchors=AnchorSet(tuple(model_set[j] for j in sel.anchors)),
        P=P,
        ipms=ipms,
        predictor=predictor,
        hyperparams=config.hyperparams,
        grid=grid_dict,
        info={"anchor_mse": sel.mse_history, "predictor_params": params},
    )


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def bundle_files(ml: MetaLearner) -> dict[str, str]:
    """Serialize every bundle file to text (manifest last, with checksums)."""
    models = [str(m) for m in ml.model_set]
    p_rows = [["dataset_id", *models]]
    p_rows += [[d, *map(format_float, row)] for d, row in zip(ml.P.dataset_ids, ml.P.values)]
    ipm_rows = [["dataset_id", "model", "mc", "select", "hits"]]
    for i, d in enumerate(ml.P.dataset_ids):
        for j, m in enumerate(models):
            ipm_rows.append([d, m, *map(format_float, ml.ipms[i, j])])
    files = {
        "P.csv": _csv_text(p_rows),
        "ipms.csv": _csv_text(ipm_rows),
        "predictor.json": json.dumps(ml.predictor.to_dict(), sort_keys=True, indent=1) + "\n",
    }
    manifest = {
        "format_version": ml.format_version,
        "hyperparams": ml.hyperparams,
        "grid": ml.grid,
        "models": models,
        "anchors": [str(a) for a in ml.anchors],
        "dataset_ids": list(ml.P.dataset_ids),
        "info": ml.info,
        "checksums": {name: _sha256(text.encode()) for name, text in sorted(files.items())},
    }
    files["manifest.json"] = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    return files


def save_meta_learner(ml: MetaLearner, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in bundle_files(ml).items():
        (directory / name).write_bytes(text.encode())
    return directory


def load_meta_learner(directory) -> MetaLearner:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise BundleError(f"missing file: {mpath}")
    manifest = json.loads(mpath.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported bundle format_version {version} (this build reads {FORMAT_VERSION})")
    raw = {}
    for name, digest in manifest["checksums"].items():
        path = directory / name
        if not path.exists():
            raise BundleError(f"missing file: {path}")
        data = path.read_bytes()
        if _sha256(data) != digest:
            raise ChecksumError(f"checksum mismatch in {name}")
        raw[name] = data.decode()
    models = ModelSet(tuple(ModelId.parse(s) for s in manifest["models"]))
    rows = list(csv.reader(io.StringIO(raw["P.csv"])))
    if rows[0][1:] != manifest["models"]:
        raise BundleError("P.csv header does not match the manifest model list")
    ids = tuple(r[0] for r in rows[1:])
    P = PerformanceMatrix(np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(ids), len(models)),
                          ids, models)
    ipms = np.full((len(ids), len(models), 3), np.nan)
    pos = {d: i for i, d in enumerate(ids)}
    for r in list(csv.reader(io.StringIO(raw["ipms.csv"])))[1:]:
        ipms[pos[r[0]], models.index(ModelId.parse(r[1]))] = [float(v) for v in r[2:5]]
    predictor = GbtModel.from_dict(json.loads(raw["predictor.json"]))
    return MetaLearner(
        model_set=models,
        anchors=AnchorSet(tuple(ModelId.parse(s) for s in manifest["anchors"])),
        P=P,
        ipms=ipms,
        predictor=predictor,
        hyperparams=manifest["hyperparams"],
        format_version=version,
        grid=manifest.get("grid"),
        info=manifest.get("info", {}),
    )
