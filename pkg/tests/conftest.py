import numpy as np
import pytest

from cliff.synth import default_benchmark
from cliff.training import TrainConfig

# Acceptance lines collected by tests/test_acceptance.py and echoed at the end
# of the run, so they show up even when pytest captures stdout.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_tasks():
    """Four small tasks: fast enough for unit tests that need real data."""
    return default_benchmark(0, n_train=12, n_val=6)


@pytest.fixture
def quick_config():
    return TrainConfig(epochs_base=1, epochs_incremental=1, batch_size=6, buffer_per_task=3, replay_batch=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_tasks():
    return default_benchmark(0)
