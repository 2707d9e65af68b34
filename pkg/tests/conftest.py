import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from softsample.geometry import Box  # noqa: E402

DATA = Path(__file__).resolve().parents[1] / "src" / "softsample" / "data"


def random_box(rng, size=20, integer=True):
    x0, x1 = sorted(rng.integers(0, size, 2) if integer else rng.uniform(0, size, 2))
    y0, y1 = sorted(rng.integers(0, size, 2) if integer else rng.uniform(0, size, 2))
    return Box(float(x0), float(y0), float(x1 + 1), float(y1 + 1))


@st.composite
def boxes(draw, lo=0.0, hi=100.0):
    xs = sorted(draw(st.lists(st.floats(lo, hi, allow_nan=False), min_size=2, max_size=2)))
    ys = sorted(draw(st.lists(st.floats(lo, hi, allow_nan=False), min_size=2, max_size=2)))
    return Box(xs[0], ys[0], xs[1], ys[1])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def data_dir():
    return DATA


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
