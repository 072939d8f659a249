"""Shared pytest plumbing: the acceptance-criteria result board.

Acceptance tests append (number, description, status, detail) rows; after
the run a summary section prints one line per criterion so the verdicts
are readable without digging through the verbose listing.
"""

import pytest

ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, desc, status, detail in sorted(ACCEPTANCE_RESULTS):
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"criterion {num:2d} {status}: {desc}{suffix}")
