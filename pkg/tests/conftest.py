import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    # one line per acceptance criterion, collected from the call phase (or a failed/skipped setup)
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        detail = dict(report.user_properties).get("measured", "")
        _criteria.append((marks, status, detail))


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = mark.args
    return report


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), status, detail in sorted(_criteria, key=lambda r: r[0][0]):
        line = f"criterion {number} [{status}] {title}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
