import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from groundmix.dataset import load_manifest  # noqa: E402
from groundmix.synthetic import write_dataset  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fixture_dataset(tmp_path_factory):
    """The 10-image synthetic dataset used by CLI and acceptance tests."""
    root = tmp_path_factory.mktemp("fixture_dataset")
    return write_dataset(root, n_images=10, seed=0)


@pytest.fixture(scope="session")
def fixture_manifest(fixture_dataset):
    return load_manifest(fixture_dataset)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
