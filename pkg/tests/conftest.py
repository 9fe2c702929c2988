from __future__ import annotations

import numpy as np
import pytest

from stumprib.phantom import build_scene

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def scene():
    """Two vertebrae, one rib per side; the lower right rib is a 30 mm stump."""
    return build_scene(n_vertebrae=2, ribs_per_side=1, stump_lengths=[30.0, None])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    mark = item.get_closest_marker("acceptance")
    if mark is not None and (report.when == "call" or report.failed):
        number, title = mark.args
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        item.config.stash[ACCEPTANCE][number] = (title, "PASS" if report.passed else "FAIL", detail)
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[ACCEPTANCE]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, outcome, detail = results[number]
        line = f"criterion {number:>2} {outcome}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
