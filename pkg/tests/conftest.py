import math

import numpy as np
import pytest
from hypothesis import settings, strategies as st

from semloc.pose import Pose2

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)
angles = st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False)
poses = st.builds(Pose2, finite, finite, angles)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one verdict line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}  {title}: {detail}")
