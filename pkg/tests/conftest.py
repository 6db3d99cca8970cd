"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    detail = dict(report.user_properties).get("detail", "")
    _RESULTS[number] = {
        "title": title,
        "passed": report.passed,
        "seconds": report.duration,
        "detail": detail if report.passed else (detail or str(report.longrepr).splitlines()[-1]),
    }


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        r = _RESULTS[number]
        status = "PASS" if r["passed"] else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {r['title']} ({r['seconds']:.1f}s) {r['detail']}")
