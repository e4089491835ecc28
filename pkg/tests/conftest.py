import numpy as np
import pytest

from tempoquery import synthdata as sd


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds84():
    """20 pieces x 6 windows, split 12/4/4 pieces."""
    return sd.make_pair_dataset(20, 6, (60, 180), 84, seed=11, split_fractions=(3, 1, 1))


@pytest.fixture(scope="session")
def test_only_ds84():
    """600 test pairs for pool-of-500 checks."""
    return sd.make_pair_dataset(60, 10, (60, 180), 84, seed=5, split_fractions=(0, 0, 1))


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one pass/fail line per acceptance criterion for the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lines


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
