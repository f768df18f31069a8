import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

_criteria = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    name = props["criterion"]
    if report.when == "call" or report.outcome != "passed":
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if _criteria.get(name) != "FAIL":
            _criteria[name] = status


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        terminalreporter.write_line(f"criterion {name}: {_criteria[name]}")
