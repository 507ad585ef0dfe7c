import numpy as np
import pytest

from promptfill.data import build_dataset
from promptfill.numerics import set_precision


@pytest.fixture(autouse=True)
def _reset_precision():
    yield
    set_precision("float32")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small generated corpus shared by the data, training and CLI tests."""
    out = tmp_path_factory.mktemp("tiny")
    paths = build_dataset(96, 1.0, 7, out, (64 / 96, 16 / 96, 16 / 96))
    return {name: str(p) for name, p in paths.items()} | {"root": str(out)}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criteria_log(request):
    """Collects one line per acceptance criterion; echoed again in the terminal summary."""
    return request.config.stash.setdefault(_CRITERIA, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split(":")[0]):
            terminalreporter.write_line(line)
