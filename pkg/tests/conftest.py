import os

import numpy as np
import pytest

from unlearnlab import nn

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_DATA = os.path.join(ROOT, "data")

if "UNLEARN_DATA_DIR" not in os.environ and os.path.isdir(DEFAULT_DATA):
    os.environ["UNLEARN_DATA_DIR"] = DEFAULT_DATA

HAVE_DATA = os.path.isfile(os.path.join(os.environ.get("UNLEARN_DATA_DIR", DEFAULT_DATA), "mnist", "train-images-idx3-ubyte"))
needs_data = pytest.mark.skipif(not HAVE_DATA, reason="desk datasets missing; run scripts/make_desk_data.py")

# acceptance verdicts, printed after the run
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return nn.NetworkSpec(
        [nn.conv(3, 1, 3), nn.channel_norm(), nn.relu(), nn.avgpool(), nn.flatten(), nn.linear(3 * 4 * 4, 4)],
        4,
        (1, 8, 8),
    )


@pytest.fixture(scope="session")
def mnist_train():
    if not HAVE_DATA:
        pytest.skip("desk datasets missing; run scripts/make_desk_data.py")
    from unlearnlab import data

    return data.load_dataset("mnist", "train")
