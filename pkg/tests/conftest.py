import numpy as np
import pytest

from ppfl.core import LabeledDataset, make_shards

ACCEPTANCE_LINES = []


def random_dataset(rng, n, d, task, n_classes=1):
    X = rng.standard_normal((n, d))
    if task == "regression":
        y = rng.standard_normal(n)
    elif task == "binary":
        y = rng.integers(0, 2, n)
        n_classes = 2
    else:
        y = rng.integers(0, n_classes, n)
    return LabeledDataset(X, y, task, n_classes)


def random_shards(rng, M, n, d, task, n_classes=1, n_test=5):
    trains = [random_dataset(rng, n + i, d, task, n_classes) for i in range(M)]
    tests = [random_dataset(rng, n_test, d, task, n_classes) for _ in range(M)]
    return make_shards(trains, tests)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
