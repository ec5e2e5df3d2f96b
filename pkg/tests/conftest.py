import os

import numpy as np
import pytest
import torch

torch.set_num_threads(int(os.environ.get("MELCTL_THREADS", "1")))

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported as PASS/FAIL")
    config.stash[_VERDICTS] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = call.excinfo.typename if call.excinfo else "error"
    line = f"{'PASS' if rep.passed else 'FAIL'} {number:>2}. {title}: {detail}"
    item.config.stash[_VERDICTS].append((number, line))
    print("\n" + line)


def pytest_terminal_summary(terminalreporter, config):
    verdicts = sorted(config.stash.get(_VERDICTS, []))
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for _, line in verdicts:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
