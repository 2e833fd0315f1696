"""Acceptance summary: one pass/fail line per criterion after the run."""

import re

_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        if report.outcome == "failed" and not detail:
            detail = str(report.longrepr).strip().splitlines()[-1][:160]
        _RESULTS[int(m.group(1))] = (report.outcome.upper(), detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        outcome, detail = _RESULTS[n]
        verdict = {"PASSED": "PASS", "FAILED": "FAIL"}.get(outcome, outcome)
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")
