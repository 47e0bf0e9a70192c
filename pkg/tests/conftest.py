import re

from helpers import ACCEPTANCE_DETAIL

_OUTCOMES: dict[int, list[bool]] = {}
_NAME = re.compile(r"test_acceptance\.py::test_c(\d+)_")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES.setdefault(int(m.group(1)), []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        status = "PASS" if all(_OUTCOMES[n]) else "FAIL"
        detail = "; ".join(ACCEPTANCE_DETAIL.get(n, []))
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
