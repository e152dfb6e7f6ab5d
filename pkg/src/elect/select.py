"""Online phase: coverage-driven initialization and EI-driven adaptive search."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import detectors
from .core import Dataset, ModelId, make_rng
from .ipm import compute_ipms
from .metatrain import MetaLearner
from .metrics import ap_ranks
from .predictor import predict_gaps
from .similarity import GapSource, GapTable, NeighborSet, taus_to_meta_tasks, top_t_neighbors

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# initialization

def coverage_init(P, init_size: int, strict: bool = True) -> list[int]:
    """Greedy seed set covering each task's best and worst model.

    A task counts as covered once its top and bottom model are both in the
    subset (``strict``) or at least one of them (``strict=False``). Each step
    adds the model that is top or bottom of the most uncovered tasks; when
    nothing is left to cover, the best remaining models by mean AP fill up.
    """
    Pv = np.asarray(getattr(P, "values", P), dtype=np.float64)
    n, m = Pv.shape
    if init_size > m:
        raise ValueError(f"init_size={init_size} exceeds the model count m={m}")
    top = np.argmax(Pv, axis=1)
    bottom = np.argmin(Pv, axis=1)
    chosen: list[int] = []
    inset = np.zeros(m, dtype=bool)

    def covered(i):
        if strict:
            return inset[top[i]] and inset[bottom[i]]
        return inset[top[i]] or inset[bottom[i]]

    while len(chosen) < init_size:
        counts = np.zeros(m, dtype=np.int64)
        for i in range(n):
            if covered(i):
                continue
            for j in {int(top[i]), int(bottom[i])}:
                if not inset[j]:
                    counts[j] += 1
        if counts.max() == 0:
            break
        j = int(np.argmax(counts))
        chosen.append(j)
        inset[j] = True
    if len(chosen) < init_size:
        mean = Pv.mean(axis=0)
        for j in sorted(range(m), key=lambda j: (-mean[j], j)):
            if len(chosen) == init_size:
                break
            if not inset[j]:
                chosen.append(j)
                inset[j] = True
    return chosen


def random_init(m: int, init_size: int, seed: int) -> list[int]:
    if init_size > m:
        raise ValueError(f"init_size={init_size} exceeds the model count m={m}")
    return [int(j) for j in make_rng(seed).choice(m, size=init_size, replace=False)]


# ---------------------------------------------------------------------------
# acquisition

def norm_cdf(u: float) -> float:
    return 0.5 * math.erfc(-u / SQRT2)


def norm_pdf(u: float) -> float:
    return INV_SQRT_2PI * math.exp(-0.5 * u * u)


def neighbor_stats(P, neighbor_rows: Sequence[int], j: int) -> tuple[float, float]:
    """Mean and population standard deviation of model ``j`` over the neighbors."""
    Pv = np.asarray(getattr(P, "values", P), dtype=np.float64)
    if len(neighbor_rows) == 0:
        raise ValueError("neighbor set is empty")
    vals = Pv[list(neighbor_rows), j]
    return float(vals.mean()), float(vals.std())


def expected_improvement(mu: float, sigma: float, mu_star: float) -> float:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return 0.0
    u = (mu - mu_star) / sigma
    return sigma * (u * norm_cdf(u) + norm_pdf(u))


def acquisition_values(P, neighbor_rows: Sequence[int], subset: Sequence[int], kind: str = "ei") -> np.ndarray:
    """Acquisition value for every model (``-inf`` for subset members)."""
    Pv = np.asarray(getattr(P, "values", P), dtype=np.float64)
    rows = Pv[list(neighbor_rows)]
    mu = rows.mean(axis=0)
    sigma = rows.std(axis=0)
    kind = kind.lower()
    if kind == "ei":
        mu_star = float(mu[list(subset)].max()) if len(subset) else -math.inf
        vals = np.array([expected_improvement(mu[j], sigma[j], mu_star) for j in range(len(mu))])
    elif kind == "sum":
        vals = sigma**2 + mu
    elif kind == "greedy":
        vals = mu.copy()
    else:
        raise ValueError(f"unknown acquisition kind {kind!r}")
    vals[list(subset)] = -math.inf
    return vals


def acquisition(P, neighbor_rows: Sequence[int], subset: Sequence[int], kind: str = "ei") -> int:
    """Index of the best model outside ``subset``; ties go to the lowest index."""
    m = np.asarray(getattr(P, "values", P)).shape[1]
    if len(set(subset)) >= m:
        raise ValueError("every model is already in the subset")
    return int(np.argmax(acquisition_values(P, neighbor_rows, subset, kind)))


def select_from_neighbors(P, neighbor_rows: Sequence[int]) -> int:
    """Model with the largest mean performance over the neighbor tasks."""
    Pv = np.asarray(getattr(P, "values", P), dtype=np.float64)
    return int(np.argmax(Pv[list(neighbor_rows)].mean(axis=0)))


# ---------------------------------------------------------------------------
# trace

@dataclass
class IterationRecord:
    iteration: int
    subset: list[int]
    neighbors: list[str]
    taus: list[float]
    selected: int
    selected_model: str
    added: int | None = None
    added_value: float | None = None
    selected_ap_rank: float | None = None


@dataclass
class SelectionTrace:
    records: list[IterationRecord] = field(default_factory=list)
    anchor_fits: list[str] = field(default_factory=list)
    init_fits: list[str] = field(default_factory=list)
    expansion_fits: list[str] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def fitted(self) -> list[str]:
        return self.anchor_fits + self.init_fits + self.expansion_fits

    @property
    def n_fitted(self) -> int:
        return len(self.fitted)

    def to_dict(self) -> dict:
        return {
            "stop_reason": self.stop_reason,
            "anchor_fits": self.anchor_fits,
            "init_fits": self.init_fits,
            "expansion_fits": self.expansion_fits,
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionTrace":
        return cls(
            records=[IterationRecord(**r) for r in d["records"]],
            anchor_fits=list(d["anchor_fits"]),
            init_fits=list(d["init_fits"]),
            expansion_fits=list(d["expansion_fits"]),
            stop_reason=d.get("stop_reason", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "subset_size", "neighbors", "mean_tau", "selected_model", "selected_ap_rank",
                    "added", "added_value"])
        for r in self.records:
            w.writerow([r.iteration, len(r.subset), ";".join(r.neighbors),
                        repr(float(np.mean(r.taus))), r.selected_model,
                        "" if r.selected_ap_rank is None else repr(r.selected_ap_rank),
                        "" if r.added is None else r.added,
                        "" if r.added_value is None else repr(r.added_value)])
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        path.with_suffix(".csv").write_text(self.to_csv())


# ---------------------------------------------------------------------------
# adaptive search

def adaptive_select(
    D_test: Dataset | None,
    ml: MetaLearner,
    budget: int | None = None,
    patience: int | None = None,
    acquisition_kind: str = "ei",
    *,
    t: int | None = None,
    init_size: int | None = None,
    init: str = "coverage",
    strict_coverage: bool = True,
    seed: int = 0,
    score_fn: Callable[[ModelId], np.ndarray] | None = None,
    eval_ap: np.ndarray | None = None,
) -> tuple[ModelId, SelectionTrace]:
    """Select a model for the unlabeled ``D_test``.

    ``score_fn`` supplies z-normalized scores of a model on the test data
    (defaults to fitting it on ``D_test``); each model is requested at most
    once. ``eval_ap`` holds held-out APs used only to annotate the trace.
    """
    hp = ml.hyperparams
    budget = hp["budget"] if budget is None else budget
    patience = hp["patience"] if patience is None else patience
    t = hp["t"] if t is None else t
    init_size = hp["init_size"] if init_size is None else init_size
    if budget < 1 or patience < 1:
        raise ValueError("budget and patience must be positive")
    if D_test is not None and D_test.labels is not None:
        raise ValueError("selection takes an unlabeled dataset; strip labels with Dataset.unlabeled()")
    if score_fn is None:
        if D_test is None:
            raise ValueError("need a dataset or a score function")
        score_fn = lambda model: detectors.fit_score(D_test, model)  # noqa: E731

    models = ml.model_set
    P = ml.P.values
    m = len(models)
    ranks = ap_ranks(eval_ap) if eval_ap is not None else None
    trace = SelectionTrace()
    scores: dict[int, np.ndarray] = {}

    def fit(j: int, bucket: list[str]) -> np.ndarray:
        if j not in scores:
            scores[j] = np.asarray(score_fn(models[j]), dtype=np.float64)
            bucket.append(str(models[j]))
        return scores[j]

    anchor_idx = ml.anchor_indices
    anchor_scores = {models[a]: fit(a, trace.anchor_fits) for a in anchor_idx}

    if init == "coverage":
        subset = coverage_init(P, init_size, strict=strict_coverage)
    elif init == "random":
        subset = random_init(m, init_size, seed)
    else:
        raise ValueError(f"unknown init {init!r}")
    ipm: dict[int, np.ndarray] = {}
    for j in subset:
        ipm[j] = compute_ipms(models[j], fit(j, trace.init_fits), anchor_scores).as_array()

    gap_cache: dict[tuple[int, int], float] = {}
    prev: set[str] | None = None
    unchanged = 0
    it = 0
    while True:
        it += 1
        order = sorted(subset)
        pairs = [(a, b) for x, a in enumerate(order) for b in order[x + 1:]]
        new = [p for p in pairs if p not in gap_cache]
        if new:
            A = np.array([ipm[a] for a, _ in new])
            B = np.array([ipm[b] for _, b in new])
            for p, g in zip(new, predict_gaps(ml.predictor, A, B)):
                gap_cache[p] = float(g)
        table = GapTable(np.array(pairs, dtype=np.int64).reshape(-1, 2),
                         np.array([gap_cache[p] for p in pairs]), GapSource.PREDICTED)
        taus = taus_to_meta_tasks(table, P)
        nbrs: NeighborSet = top_t_neighbors(taus, t, ml.P.dataset_ids)
        rows = [ml.P.dataset_ids.index(d) for d in nbrs.dataset_ids]
        chosen = select_from_neighbors(P, rows)
        rec = IterationRecord(
            iteration=it, subset=list(subset), neighbors=list(nbrs.dataset_ids), taus=list(nbrs.similarities),
            selected=chosen, selected_model=str(models[chosen]),
            selected_ap_rank=None if ranks is None else float(ranks[chosen]),
        )
        trace.records.append(rec)

        current = set(nbrs.dataset_ids)
        unchanged = unchanged + 1 if current == prev else 0
        prev = current
        if unchanged >= patience:
            trace.stop_reason = "patience"
            break
        if it >= budget:
            trace.stop_reason = "budget"
            break
        if len(subset) >= m:
            trace.stop_reason = "exhausted"
            break
        vals = acquisition_values(P, rows, subset, acquisition_kind)
        j = int(np.argmax(vals))
        rec.added, rec.added_value = j, float(vals[j])
        subset.append(j)
        ipm[j] = compute_ipms(models[j], fit(j, trace.expansion_fits), anchor_scores).as_array()

    return models[trace.records[-1].selected], trace
