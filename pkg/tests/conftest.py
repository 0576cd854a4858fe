"""Shared test hooks.

Acceptance tests append one verdict line per criterion to ``VERDICTS``; the
lines are printed in the terminal summary so they appear without ``-s``.
"""

VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
