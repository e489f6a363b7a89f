"""Shared test setup.

Tests marked ``acceptance(n, title)`` get a one-line PASS/FAIL summary per
criterion at the end of the run, whatever the output capture mode.
"""
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))

_OUTCOMES = {}


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        crit = _CRITERIA.get(report.nodeid)
        if crit is not None:
            prev = _OUTCOMES.get(crit, True)
            _OUTCOMES[crit] = prev and report.outcome == "passed"


_CRITERIA = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _CRITERIA[item.nodeid] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), ok in sorted(_OUTCOMES.items()):
        terminalreporter.write_line(f"AC-{n:02d} {'PASS' if ok else 'FAIL'}  {title}")
