"""Shared pytest plumbing: the acceptance-criteria scoreboard.

Acceptance tests record one (pass, detail) entry per criterion through the
`criteria` fixture; the terminal summary prints one line per criterion so a
full run ends with a readable scoreboard. Criteria whose test never recorded
(crashed early, or deselected with -k) show up as NOT RUN rather than being
silently dropped.
"""

import pytest

CRITERIA_KEY = pytest.StashKey()
N_CRITERIA = 12


def pytest_configure(config):
    config.stash[CRITERIA_KEY] = {}


@pytest.fixture(scope="session")
def criteria(request):
    return request.config.stash[CRITERIA_KEY]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    entries = config.stash.get(CRITERIA_KEY, None) or {}
    if not entries:
        return
    terminalreporter.section("acceptance criteria")
    for num in range(1, N_CRITERIA + 1):
        if num in entries:
            ok, detail = entries[num]
            state = "PASS" if ok else "FAIL"
        else:
            state, detail = "NOT RUN", "no result recorded"
        terminalreporter.write_line(f"[criterion {num:2d}] {state} - {detail}")
