import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, title)`` returns a recorder."""

    class Recorder:
        def __init__(self, n, title):
            self.n, self.title, self.details, self.ok = n, title, [], None

        def note(self, text):
            self.details.append(text)

        def verdict(self, ok):
            self.ok = bool(ok)
            _CRITERIA[self.n] = self
            return self.ok

    def make(n, title):
        rec = Recorder(n, title)
        _CRITERIA[n] = rec
        return rec

    return make


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        rec = _CRITERIA[n]
        status = "PASS" if rec.ok else "FAIL"
        detail = "; ".join(rec.details)
        terminalreporter.write_line(f"criterion {n} [{status}] {rec.title}: {detail}")
