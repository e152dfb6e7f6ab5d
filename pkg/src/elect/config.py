"""Run configuration shared by meta-training, selection, and the harness."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .predictor import DEFAULT_PARAM_GRID

# Cheaper learner used only to score candidate anchor sets.
ANCHOR_PARAMS = {"n_trees": 40, "max_depth": 3, "learning_rate": 0.1, "min_leaf": 20, "seed": 0}

ACQUISITIONS = ("ei", "sum", "greedy")


@dataclass
class Config:
    grid: str | None = None
    t: int = 5
    t_grid: list | None = None
    init_size: int = 7
    patience: int = 17
    budget: int = 50
    trials: int = 1
    seed: int = 0
    acquisition: str = "ei"
    init: str = "coverage"
    coverage: str = "strict"
    max_anchors: int = 8
    anchor_pool: int = 16
    anchor_tol: float = 0.01
    anchor_pair_models: int = 31
    k_folds: int = 3
    anchor_params: dict = field(default_factory=lambda: dict(ANCHOR_PARAMS))
    predictor_grid: list = field(default_factory=lambda: [dict(p) for p in DEFAULT_PARAM_GRID])
    fixed_model: str = "iforest(n_trees=100,subsample=128,seed=1)"
    jobs: int | None = None

    def __post_init__(self):
        for name in ("t", "init_size", "patience", "budget", "trials", "max_anchors", "anchor_pool", "anchor_pair_models", "k_folds"):
            if getattr(self, name) < 1:
                raise ValueError(f"config.{name} must be positive")
        if self.t_grid is not None and (not self.t_grid or min(self.t_grid) < 1):
            raise ValueError("config.t_grid must hold positive neighbor counts")
        if self.acquisition not in ACQUISITIONS:
            raise ValueError(f"acquisition must be one of {ACQUISITIONS}")
        if self.init not in ("coverage", "random"):
            raise ValueError("init must be 'coverage' or 'random'")
        if self.coverage not in ("strict", "loose"):
            raise ValueError("coverage must be 'strict' or 'loose'")

    @property
    def hyperparams(self) -> dict:
        return {"t": self.t, "init_size": self.init_size, "patience": self.patience, "budget": self.budget}

    def replace(self, **changes) -> "Config":
        d = asdict(self)
        d.update(changes)
        return Config(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))


def env_seed(default: int = 0) -> int:
    """Seed fallback from ``ELECT_SEED``."""
    v = os.environ.get("ELECT_SEED")
    return int(v) if v not in (None, "") else default
