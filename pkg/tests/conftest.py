"""Shared test plumbing.

The acceptance tests (test_acceptance.py) each carry an `acceptance(n, name)`
marker; after the run we print one PASS/FAIL line per criterion so the
suite's verdict is scannable without reading pytest output.
"""

import pytest

_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(n, name): acceptance criterion metadata")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n, name = marker.args
    if report.when == "call":
        _RESULTS[n] = (name, "PASS" if report.passed else "FAIL")
    elif report.when == "setup" and (report.failed or report.skipped):
        _RESULTS[n] = (name, "FAIL")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    tw = terminalreporter
    tw.section("acceptance criteria")
    for n in sorted(_RESULTS):
        name, verdict = _RESULTS[n]
        tw.write_line(f"ACCEPTANCE c{n} {name}: {verdict}")
