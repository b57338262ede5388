import numpy as np
import pytest
from hypothesis import settings

from blindat.nn import Layer, Model

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def linear_model(w, b=0.0, activation="identity"):
    w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    return Model((Layer(w, np.array([float(b)]), activation),))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tcc_bat():
    """A small blind-trained circles model, shared across modules."""
    from blindat.tcc import TccConfig, run_tcc_experiment

    cfg = TccConfig(strategy="bat", seed=3, epochs=1500, n_train=500, n_test=10, n_rays=1024, track_every=10**6)
    return run_tcc_experiment(cfg)


@pytest.fixture(scope="session")
def tcc_nt():
    from blindat.tcc import TccConfig, run_tcc_experiment

    cfg = TccConfig(strategy="nt", seed=3, epochs=3000, n_train=500, n_test=10, n_rays=1024, track_every=10**6)
    return run_tcc_experiment(cfg)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
