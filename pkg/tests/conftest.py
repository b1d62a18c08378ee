import os

import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(id, ok, text, known_gap=False)``.

    Returns ``ok`` so a test can assert on it after the line is recorded.
    """
    def record(cid, ok, text, known_gap=False):
        ok = bool(ok)
        status = "PASS" if ok else ("FAIL (known gap)" if known_gap else "FAIL")
        line = f"criterion {cid:<4} {status:<16} {text}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in _CRITERIA:
        terminalreporter.write_line(line)
