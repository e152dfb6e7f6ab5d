import pytest

from elect.config import Config
from elect.detectors import build_model_set
from elect.metatrain import meta_train
from elect.testbed import make_controlled_testbed, synthetic_mothersets

TINY_GRID = {
    "knn": {"k": [5, 20], "agg": ["largest", "mean"]},
    "lof": {"k": [10, 25], "metric": ["euclidean"]},
    "iforest": {"n_trees": [50], "subsample": [64], "seed": [1, 2]},
    "hbos": {"n_bins": [10]},
    "pca_recon": {"var_fraction": [0.5]},
}

FAST = {"n_trees": 20, "max_depth": 3, "learning_rate": 0.1, "min_leaf": 10, "seed": 0}


def fast_config(**changes) -> Config:
    base = Config(
        max_anchors=2,
        anchor_pool=4,
        anchor_params=dict(FAST),
        predictor_grid=[dict(FAST)],
        fixed_model="iforest(n_trees=50,subsample=64,seed=1)",
    )
    return base.replace(**changes)


@pytest.fixture(scope="session")
def tiny_grid():
    return TINY_GRID


@pytest.fixture(scope="session")
def tiny_models():
    return build_model_set(TINY_GRID)


@pytest.fixture(scope="session")
def small_tasks():
    """Three synthetic mothersets, each with the three outlier kinds."""
    return make_controlled_testbed(synthetic_mothersets(3, seed=1, r_range=(150, 200)), seed=1)


@pytest.fixture(scope="session")
def small_ml(small_tasks, tiny_grid):
    return meta_train(small_tasks[:-1], tiny_grid, fast_config())


CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, passed: bool, detail: str):
        request.config.stash[CRITERIA][number] = (bool(passed), detail)
        assert passed, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, {})
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(lines):
        passed, detail = lines[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
