import os

import pytest

DATA = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")

_criteria = []


@pytest.fixture
def data_path():
    def path(name):
        return os.path.join(DATA, name)
    return path


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(id, passed, detail)``."""
    def record(cid, passed, detail=""):
        _criteria.append((cid, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid, passed, detail in sorted(_criteria, key=lambda c: int(c[0][1:])):
        terminalreporter.write_line(f"{cid:<5} {'PASS' if passed else 'FAIL'}  {detail}")
