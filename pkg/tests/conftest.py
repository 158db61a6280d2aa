"""Shared pytest plumbing.

The acceptance tests record one verdict line per criterion.  Default
output capture would hide those lines for passing tests, so they are
collected here and replayed in the terminal summary where capture is
suspended.
"""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in VERDICTS:
            terminalreporter.write_line(line)
