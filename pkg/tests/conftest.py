import numpy as np
import pytest
import torch

from microdiff.schedule import linear_schedule

from helpers import toy_dataset, train_toy

torch.set_num_threads(1)

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion with a summary line")


@pytest.fixture(scope="session")
def sched():
    return linear_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy():
    """Unconditional toy model on 500 circular-inclusion images (32x32), trained once per session."""
    structures, data = toy_dataset()
    model, losses, seconds = train_toy(data)
    return {"structures": structures, "data": data, "model": model, "losses": losses, "train_seconds": seconds}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    rep = outcome.get_result()
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    _CRITERIA[mark.args[0]] = (mark.args[1], rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d} {name}: {'PASS' if ok else 'FAIL'}  {detail}")
