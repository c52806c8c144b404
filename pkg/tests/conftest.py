from __future__ import annotations

import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion.

    Usage: ``criterion(number, title, passed, detail)``.  The lines are
    printed in the terminal summary whether or not output capture is on.
    """

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        tag = "PASS" if passed else "FAIL"
        _ACCEPTANCE.append(f"[{tag}] criterion {number:>2}: {title} -- {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
