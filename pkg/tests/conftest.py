import os

import numpy as np
import pytest

PAPER_SCALE = os.environ.get("BSLKIT_PAPER_SCALE", "") not in ("", "0")


def pytest_collection_modifyitems(config, items):
    if PAPER_SCALE:
        return
    skip = pytest.mark.skip(reason="full-scale run; set BSLKIT_PAPER_SCALE=1")
    for item in items:
        if "paper_scale" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
