"""Controlled-testbed construction by synthetic outlier injection."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Dataset, DataError, derive_seed, load_dataset, make_rng, save_dataset

COV_INFLATION = 4.0
CLUSTER_SHRINK = 0.1
BALL_QUANTILE = 0.9
MAX_ATTEMPTS = 10_000
DEFAULT_RATE = 0.05
MIN_INLIERS = 50
MIN_OUTLIERS = 5


class OutlierKind(enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"
    CLUSTERED = "clustered"


class InjectionError(DataError):
    pass


@dataclass(frozen=True)
class InjectionSpec:
    kind: OutlierKind
    rate: float = DEFAULT_RATE
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.rate <= 0.2:
            raise ValueError("rate must lie in (0, 0.2]")
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", OutlierKind(self.kind))

    def count(self, r: int) -> int:
        return math.ceil(self.rate * r)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "rate": self.rate, "seed": self.seed}


def _gaussian(X: np.ndarray):
    mu = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
    # keep the fitted covariance invertible on degenerate features
    cov = cov + np.eye(len(mu)) * 1e-9 * max(1.0, float(np.trace(cov)))
    prec = np.linalg.inv(cov)
    md = np.einsum("ij,jk,ik->i", X - mu, prec, X - mu)
    radius = float(np.quantile(md, BALL_QUANTILE))
    return mu, cov, prec, radius


def _mahal(Z, mu, prec):
    D = np.atleast_2d(Z) - mu
    return np.einsum("ij,jk,ik->i", D, prec, D)


def inject_outliers(inliers: Dataset, spec: InjectionSpec) -> Dataset:
    """Append ``ceil(rate * r)`` synthetic outliers (label 1) to ``inliers``.

    GLOBAL samples the bounding box widened by 10% of each range; LOCAL draws
    from the fitted Gaussian with 4x covariance, rejecting points inside the
    0.9-quantile Mahalanobis ball of the inliers; CLUSTERED draws one such
    out-of-ball center and places all outliers around it with 0.1x
    covariance.
    """
    X = inliers.X
    r, d = X.shape
    if r < MIN_INLIERS:
        raise InjectionError(f"{inliers.id}: need at least {MIN_INLIERS} inliers, have {r}")
    q = spec.count(r)
    if q < MIN_OUTLIERS:
        raise InjectionError(f"{inliers.id}: rate {spec.rate} yields {q} < {MIN_OUTLIERS} outliers")
    rng = make_rng(spec.seed)
    if spec.kind is OutlierKind.GLOBAL:
        lo, hi = X.min(axis=0), X.max(axis=0)
        pad = 0.1 * (hi - lo)
        out = rng.uniform(lo - pad, hi + pad, size=(q, d))
    else:
        mu, cov, prec, radius = _gaussian(X)
        L = np.linalg.cholesky(cov)

        def draw_outside(count):
            got = []
            attempts = 0
            while len(got) < count:
                if attempts >= MAX_ATTEMPTS:
                    raise InjectionError(f"{inliers.id}: rejection sampling exhausted after {attempts} draws")
                batch = min(MAX_ATTEMPTS - attempts, max(64, 4 * (count - len(got))))
                Z = mu + math.sqrt(COV_INFLATION) * rng.standard_normal((batch, d)) @ L.T
                attempts += batch
                keep = Z[_mahal(Z, mu, prec) > radius]
                got.extend(keep[: count - len(got)])
            return np.array(got)

        if spec.kind is OutlierKind.LOCAL:
            out = draw_outside(q)
        else:
            center = draw_outside(1)[0]
            out = center + math.sqrt(CLUSTER_SHRINK) * rng.standard_normal((q, d)) @ L.T
    Xn = np.vstack([X, out])
    y = np.concatenate([np.zeros(r, np.int8), np.ones(q, np.int8)])
    return Dataset(inliers.id, Xn, y)


def strip_outliers(ds: Dataset) -> Dataset:
    if ds.labels is None:
        return Dataset(ds.id, ds.X)
    return Dataset(ds.id, ds.X[ds.labels == 0])


def make_controlled_testbed(mothersets: Sequence[Dataset], seed: int = 0, rate: float = DEFAULT_RATE) -> list[Dataset]:
    """Inject each outlier kind into every motherset: ``len(mothersets) * 3`` tasks."""
    if len(mothersets) < 2:
        raise ValueError("need at least 2 mothersets")
    out = []
    for i, ms in enumerate(mothersets):
        base = strip_outliers(ms)
        for k, kind in enumerate(OutlierKind):
            spec = InjectionSpec(kind, rate, derive_seed(seed, i, k))
            ds = inject_outliers(base, spec)
            out.append(Dataset(f"{ms.id}__{kind.value}", ds.X, ds.labels))
    return out


def synthetic_mothersets(count: int = 8, seed: int = 0, *, r_range=(300, 420), d_range=(3, 8),
                         max_components: int = 3) -> list[Dataset]:
    """Unlabeled Gaussian-mixture mothersets with seeded random parameters."""
    rng = make_rng(seed)
    out = []
    for i in range(count):
        r = int(rng.integers(r_range[0], r_range[1] + 1))
        d = int(rng.integers(d_range[0], d_range[1] + 1))
        k = int(rng.integers(1, max_components + 1))
        weights = rng.dirichlet(np.full(k, 3.0))
        sizes = np.maximum(1, np.round(weights * r).astype(int))
        sizes[-1] = max(1, r - sizes[:-1].sum())
        parts = []
        for c in range(k):
            mean = rng.uniform(-5, 5, size=d)
            A = rng.normal(size=(d, d)) * rng.uniform(0.3, 1.2)
            cov = A @ A.T / d + np.eye(d) * 0.05
            parts.append(rng.multivariate_normal(mean, cov, size=int(sizes[c]), method="cholesky"))
        X = np.vstack(parts)
        X = X[rng.permutation(len(X))]
        out.append(Dataset(f"ms{i:02d}", X))
    return out


# ---------------------------------------------------------------------------
# manifests

def write_testbed(datasets: Sequence[Dataset], out_dir, lineage: dict | None = None) -> Path:
    """Write datasets as CSV plus a ``manifest.json`` listing them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in datasets:
        path = save_dataset(ds, out_dir / f"{ds.id}.csv")
        entry = {"id": ds.id, "path": path.name, "has_labels": ds.labels is not None}
        if lineage and ds.id in lineage:
            entry.update(lineage[ds.id])
        entries.append(entry)
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"datasets": entries}, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> list[Dataset]:
    """Load every dataset listed in a manifest (paths relative to it)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    out = []
    for e in doc["datasets"]:
        p = Path(e["path"])
        if not p.is_absolute():
            p = path.parent / p
        ds = load_dataset(p, bool(e.get("has_labels", True)))
        out.append(Dataset(e.get("id", ds.id), ds.X, ds.labels))
    return out


def testbed_lineage(mothersets: Sequence[Dataset], seed: int, rate: float = DEFAULT_RATE) -> dict:
    lineage = {}
    for i, ms in enumerate(mothersets):
        for k, kind in enumerate(OutlierKind):
            lineage[f"{ms.id}__{kind.value}"] = {
                "motherset": ms.id,
                "injection": InjectionSpec(kind, rate, derive_seed(seed, i, k)).to_dict(),
            }
    return lineage


def default_controlled_testbed(seed: int = 0, mothersets: int = 8) -> list[Dataset]:
    """The shipped testbed: synthetic mothersets x {global, local, clustered}."""
    return make_controlled_testbed(synthetic_mothersets(mothersets, seed), seed)
