import sys

import numpy as np
import pytest

from cltr.dataset import Dataset, Query, generate_synthetic_ltr
from cltr.ranking import LinearModel
from cltr.simulation import BiasConfig, ClickLog, simulate_clicks


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_ltr(30, 12, 4, seed=3)


@pytest.fixture(scope="session")
def small_policy(small_dataset):
    rng = np.random.default_rng(11)
    return LinearModel(rng.standard_normal(small_dataset.dim))


@pytest.fixture(scope="session")
def small_log(small_dataset, small_policy):
    return simulate_clicks(small_dataset, small_policy, BiasConfig(gamma=1.0, n_clicks=300), seed=5)


def random_log(rng, dataset, n):
    """Arbitrary click log on the train split with propensities in (0.02, 1]."""
    q = rng.integers(0, len(dataset.train), n)
    d = np.array([rng.integers(0, dataset.train[i].n_docs) for i in q])
    p = rng.uniform(0.02, 1.0, n)
    return ClickLog(q, d, p, gamma=1.0, seed=0)


def one_query_dataset(features, grades):
    q = Query("0", np.asarray(features, dtype=float), np.asarray(grades))
    return Dataset(q.dim, [q], [q], [q])


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
