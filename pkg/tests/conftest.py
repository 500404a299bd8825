"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

import pytest

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)", item.name)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        title = (item.function.__doc__ or item.name).strip().splitlines()[0].rstrip(".")
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _CRITERIA[int(m.group(1))] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, verdict, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {title}: {verdict}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
