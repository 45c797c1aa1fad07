import numpy as np
import pytest

from contrastvae.config import ModelConfig, TrainConfig
from contrastvae.model import ContrastVAE
from contrastvae.synthetic import as_split, longtail_corpus


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_items=10, d=8, heads=2, layers=1, max_len=4, augmentation="VA")


@pytest.fixture
def tiny_model(tiny_cfg):
    return ContrastVAE(tiny_cfg, seed=0).astype(np.float64)


@pytest.fixture(scope="session")
def small_split():
    return as_split(longtail_corpus(n_items=40, n_users=60, max_len=15, seed=1), 40)


@pytest.fixture
def fast_train():
    return TrainConfig(max_epochs=3, batch_size=32, patience=5, seed=0)


@pytest.fixture
def small_model_cfg():
    return ModelConfig(n_items=40, d=16, heads=2, layers=1, max_len=12)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: one test per acceptance criterion")
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[ACCEPTANCE].append(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
