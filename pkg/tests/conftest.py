import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_data():
    """A small split dataset for fast training tests."""
    from ptrag.synthdata import SyntheticConfig, generate, split_fewshot

    cfg = SyntheticConfig(G=12, E=8, P=24, C=3, m=4, S=6, seed=3)
    samples, db, truth = generate(cfg)
    return split_fewshot(samples, "T2", seed=1), db, truth


@pytest.fixture(scope="session")
def benchmark():
    """The desk-default synthetic benchmark, split on target cell type T3."""
    from ptrag.synthdata import SyntheticConfig, generate, split_fewshot

    samples, db, truth = generate(SyntheticConfig())
    return split_fewshot(samples, "T3", seed=0), db, truth


class RunCache:
    """Full-length training runs shared across test modules (keyed by config)."""

    def __init__(self, dataset, db):
        from ptrag.trainer import training_pca

        self.dataset, self.db = dataset, db
        self.pca = training_pca(dataset)
        self._runs = {}

    def get(self, config):
        from ptrag.trainer import train

        if config not in self._runs:
            self._runs[config] = train(config, self.dataset, self.db, self.pca, return_model=True)
        return self._runs[config]


@pytest.fixture(scope="session")
def runs(benchmark):
    dataset, db, _ = benchmark
    return RunCache(dataset, db)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
