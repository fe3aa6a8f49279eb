import os

import numpy as np
import pytest
import torch

torch.set_num_threads(int(os.environ.get("PETCM_THREADS", "1")))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, filled by tests/test_acceptance.py and printed at the end
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
