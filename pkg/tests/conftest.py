import logging

import pytest

from cxrkit.synthetic import make_fixture

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def fixture50(tmp_path_factory):
    """50-image synthetic NIH-shaped dataset (3 classes, 64 px)."""
    return make_fixture(tmp_path_factory.mktemp("fixture50"), n_images=50, size=64, seed=3)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
    yield


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``; the line is echoed in the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
