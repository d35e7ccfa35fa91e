import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from groupdpo import autodiff as ad
from groupdpo.model import ModelConfig, PolicyModel, freeze_reference

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


@pytest.fixture
def tape():
    t = ad.Tape()
    with ad.use_tape(t):
        yield t


@pytest.fixture(scope="session")
def canonical():
    return ModelConfig()


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(vocab_size=16, embed_dim=8, context=24, blocks=1, seed=3)


@pytest.fixture
def small_policy(small_config):
    return PolicyModel(small_config, None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def canonical_reference(canonical):
    return freeze_reference(PolicyModel(canonical))


def pytest_terminal_summary(terminalreporter):
    try:
        from acceptance_report import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
