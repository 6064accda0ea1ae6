import numpy as np
import pytest
import torch


def central_difference(f, x: torch.Tensor, index, step=1e-5) -> float:
    """Central finite difference of scalar ``f()`` w.r.t. ``x[index]`` (modified in place)."""
    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + step
        up = f().item()
        x[index] = orig - step
        down = f().item()
        x[index] = orig
    return (up - down) / (2 * step)


def rel_err(a, b) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


@pytest.fixture
def fd():
    return central_difference


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


# acceptance reporting: one pass/fail line per criterion at the end of the run

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion implemented by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, text = mark.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[number] = ("PASS" if report.passed else "FAIL", text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, text = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {text}")
