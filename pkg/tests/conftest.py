import numpy as np
import pytest

from sensorcal import data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_csv(tmp_path_factory):
    """Documented synthetic dataset: seed 1, 4 sensors x 20k one-minute readings."""
    return data.synth_generate(1, 4, 20000, tmp_path_factory.mktemp("desk") / "sensors.csv")


@pytest.fixture(scope="session")
def desk_splits(desk_csv):
    splits, plan, report = data.load_splits(desk_csv, "pm10", 60)
    return splits


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
