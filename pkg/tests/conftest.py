"""Shared test plumbing: the acceptance-criteria result banner.

Acceptance tests register one line per criterion; the summary hook prints
them at the end of the session so every criterion shows an explicit
PASS/FAIL verdict in the terminal output even when stdout capture is on.
"""

from __future__ import annotations

ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((number, title, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(
            f"criterion {number} [{status}] {title}: {detail}"
        )
