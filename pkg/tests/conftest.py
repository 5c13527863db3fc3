import os
import time

import pytest
import torch
from hypothesis import HealthCheck, settings

from aste.corpus import example_sentences, make_synthetic_fixture
from aste.encoder import EncoderSpec, TinySpec
from aste.model import ASTEModel, ModelConfig
from aste.training import TrainConfig, Trainer

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(int(os.environ.get("ASTE_TEST_THREADS", "1")))


def small_config(**kw) -> ModelConfig:
    """Narrow tiny encoder for fast unit tests."""
    return ModelConfig(encoder=EncoderSpec(tiny_spec=TinySpec(width=32, heads=2, layers=1)), **kw)


@pytest.fixture
def small_model():
    model = ASTEModel(small_config(), seed=0)
    model.eval()
    return model


@pytest.fixture(scope="session")
def overfit_fixture():
    return example_sentences() + make_synthetic_fixture(1, 8)


@pytest.fixture(scope="session")
def overfit_trainer(overfit_fixture):
    """Default-width model fitted to the 10-sentence fixture (about 20 s)."""
    start = time.perf_counter()
    trainer = Trainer(ModelConfig(), TrainConfig(seed=0, batch_size=4))
    trainer.fit(overfit_fixture, overfit_fixture, min_epochs=130, max_epochs=130, early_stopping=False)
    trainer.model.eval()
    trainer.elapsed = time.perf_counter() - start
    return trainer


# acceptance criterion -> (status, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record(criterion: int, status: str, detail: str) -> None:
    ACCEPTANCE[criterion] = (status, detail)
    print(f"criterion {criterion:2d} {status}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d} {status}: {detail}")
