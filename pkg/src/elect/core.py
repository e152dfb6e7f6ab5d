"""Core data types, CSV dataset I/O, score normalization and seeding."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed input data (CSV parsing, invariant violations)."""


class ParseError(DataError):
    """CSV parse failure with the 1-based row/column that triggered it."""

    def __init__(self, kind: str, path, row: int, column: int | None = None, detail: str = ""):
        self.kind = kind
        self.path = str(path)
        self.row = row
        self.column = column
        loc = f"row {row}" if column is None else f"row {row}, column {column}"
        msg = f"{self.path}: {kind} at {loc}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class NonNumericCell(ParseError):
    def __init__(self, path, row, column, cell):
        super().__init__("non-numeric cell", path, row, column, repr(cell))


class RaggedRow(ParseError):
    def __init__(self, path, row, expected, got):
        super().__init__("ragged row", path, row, None, f"expected {expected} columns, got {got}")


class InvalidLabel(ParseError):
    def __init__(self, path, row, column, cell):
        super().__init__("label outside {0,1}", path, row, column, repr(cell))


class EmptyFile(ParseError):
    def __init__(self, path):
        super().__init__("empty file", path, 0)


# ---------------------------------------------------------------------------
# randomness

def make_rng(seed: int) -> np.random.Generator:
    """Return the project-wide generator: numpy ``PCG64`` seeded with ``seed``.

    PCG64 streams are specified bit-for-bit by numpy and identical on every
    platform, so a seed fully determines an experiment.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically derive a child seed from ``seed`` and integer keys."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def str_key(s: str) -> int:
    """Stable integer key for a string (used when deriving seeds from ids)."""
    return int.from_bytes(s.encode("utf-8")[:16].ljust(16, b"\0"), "little") % (2**63)


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True, eq=False)
class Dataset:
    """A task: ``r x d`` sample matrix and optional binary outlier labels."""

    id: str
    X: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        if X.ndim != 2:
            raise DataError(f"{self.id}: X must be 2-d, got shape {X.shape}")
        r, d = X.shape
        if r < 2 or d < 1:
            raise DataError(f"{self.id}: need r >= 2 and d >= 1, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError(f"{self.id}: non-finite feature values")
        X.flags.writeable = False
        object.__setattr__(self, "X", X)
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (r,):
                raise DataError(f"{self.id}: labels length {y.shape} does not match r={r}")
            if not np.all((y == 0) | (y == 1)):
                raise DataError(f"{self.id}: labels must be 0/1")
            y = y.astype(np.int8)
            y.flags.writeable = False
            object.__setattr__(self, "labels", y)

    @property
    def r(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def unlabeled(self) -> "Dataset":
        """Copy with labels removed; what the online selection phase sees."""
        return Dataset(self.id, self.X)

    def check_trainable(self) -> None:
        """Labels must exist and contain both classes for meta-train/eval use."""
        if self.labels is None:
            raise DataError(f"{self.id}: dataset is unlabeled")
        s = int(self.labels.sum())
        if s == 0 or s == self.r:
            raise DataError(f"{self.id}: labels need at least one 0 and one 1")

    # neighbor tables are shared by every kNN/LOF configuration on this dataset
    @cached_property
    def _neighbor_tables(self) -> dict:
        return {}

    def neighbors(self, metric: str = "euclidean") -> tuple[np.ndarray, np.ndarray]:
        """Sorted (distances, indices) of every other point, per row.

        Self is excluded by index (not by distance), so duplicates of a point
        appear as zero-distance neighbors. Ties are ordered by sample index.
        """
        tables = self._neighbor_tables
        if metric not in tables:
            from scipy.spatial.distance import cdist

            D = cdist(self.X, self.X, metric="cityblock" if metric == "manhattan" else "euclidean")
            np.fill_diagonal(D, np.inf)
            idx = np.argsort(D, axis=1, kind="stable")[:, :-1]
            dist = np.take_along_axis(D, idx, axis=1)
            tables[metric] = (dist, idx)
        return tables[metric]


def load_dataset(path, has_labels: bool) -> Dataset:
    """Read a header-less numeric CSV (label column last when ``has_labels``)."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or all(not c.strip() for c in row):
                continue
            rows.append(row)
    if not rows:
        raise EmptyFile(path)
    width = len(rows[0])
    values = np.empty((len(rows), width), dtype=np.float64)
    for i, row in enumerate(rows, start=1):
        if len(row) != width:
            raise RaggedRow(path, i, width, len(row))
        for j, cell in enumerate(row, start=1):
            try:
                values[i - 1, j - 1] = float(cell)
            except ValueError:
                raise NonNumericCell(path, i, j, cell) from None
    if has_labels:
        if width < 2:
            raise RaggedRow(path, 1, 2, width)
        y = values[:, -1]
        for i, v in enumerate(y, start=1):
            if v not in (0.0, 1.0):
                raise InvalidLabel(path, i, width, rows[i - 1][-1])
        return Dataset(path.stem, values[:, :-1], y.astype(np.int8))
    return Dataset(path.stem, values)


def format_float(x: float) -> str:
    """17 significant digits: round-trips every finite double exactly."""
    return repr(float(x)) if math.isfinite(x) else str(x)


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for i in range(ds.r):
            row = [format_float(v) for v in ds.X[i]]
            if ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            w.writerow(row)
    return path


def znormalize(scores) -> np.ndarray:
    """(x - mean) / population std; constant input maps to all zeros."""
    x = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("znormalize: non-finite input")
    mu = x.mean()
    c = x - mu
    sd = math.sqrt(float(np.mean(c * c)))
    # relative guard: float noise on a constant vector must not blow up
    if sd <= 1e-14 * max(1.0, float(np.max(np.abs(x)))):
        return np.zeros_like(x)
    return c / sd


# ---------------------------------------------------------------------------
# models

class Family(enum.Enum):
    KNN = "knn"
    LOF = "lof"
    IFOREST = "iforest"
    HBOS = "hbos"
    PCA_RECON = "pca_recon"

    @property
    def order(self) -> int:
        return list(Family).index(self)


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True, order=False)
class ModelId:
    """A detector family plus one hyperparameter assignment.

    ``hyperparams`` is an ordered tuple of ``(name, value)`` pairs so equality
    and hashing are structural.
    """

    family: Family
    hyperparams: tuple[tuple[str, object], ...] = field(default=())

    @classmethod
    def of(cls, family: Family | str, **params) -> "ModelId":
        if isinstance(family, str):
            family = Family(family.lower())
        return cls(family, tuple(params.items()))

    @property
    def params(self) -> dict:
        return dict(self.hyperparams)

    @property
    def stochastic(self) -> bool:
        return self.family is Family.IFOREST

    def __str__(self) -> str:
        inner = ",".join(f"{k}={_fmt_value(v)}" for k, v in self.hyperparams)
        return f"{self.family.value}({inner})"

    @classmethod
    def parse(cls, text: str) -> "ModelId":
        """Inverse of ``str()``: ``knn(k=15,agg=mean)`` -> ModelId."""
        text = text.strip()
        if not text.endswith(")") or "(" not in text:
            raise ValueError(f"malformed model id {text!r}")
        name, inner = text[:-1].split("(", 1)
        family = Family(name)
        params = []
        if inner:
            for part in inner.split(","):
                k, _, v = part.partition("=")
                params.append((k, _parse_scalar(v)))
        return cls(family, tuple(params))


def _parse_scalar(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


@dataclass(frozen=True)
class ModelSet:
    """Ordered candidate pool; the order is the canonical model index."""

    models: tuple[ModelId, ...]

    def __post_init__(self):
        models = tuple(self.models)
        if len(set(models)) != len(models):
            raise ValueError("ModelSet contains duplicate ModelIds")
        object.__setattr__(self, "models", models)

    def __len__(self) -> int:
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    def __getitem__(self, j):
        return self.models[j]

    @cached_property
    def _index(self) -> dict:
        return {m: j for j, m in enumerate(self.models)}

    def index(self, model: ModelId) -> int:
        return self._index[model]

    def __contains__(self, model) -> bool:
        return model in self._index


@dataclass(frozen=True, eq=False)
class PerformanceMatrix:
    """``n x m`` ground-truth AP of every model on every meta-train task."""

    values: np.ndarray
    dataset_ids: tuple[str, ...]
    model_set: ModelSet

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        ids = tuple(self.dataset_ids)
        if v.shape != (len(ids), len(self.model_set)):
            raise ValueError(f"P shape {v.shape} inconsistent with {len(ids)} tasks x {len(self.model_set)} models")
        if not np.all((v >= 0) & (v <= 1)):
            raise ValueError("P entries must lie in [0, 1]")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate dataset ids in P")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "dataset_ids", ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def subset_rows(self, ids: Iterable[str]) -> "PerformanceMatrix":
        pos = {d: i for i, d in enumerate(self.dataset_ids)}
        ids = list(ids)
        return PerformanceMatrix(self.values[[pos[d] for d in ids]], tuple(ids), self.model_set)

    def row(self, dataset_id: str) -> np.ndarray:
        return self.values[self.dataset_ids.index(dataset_id)]


def as_index_list(xs: Sequence[int]) -> list[int]:
    return [int(x) for x in xs]
