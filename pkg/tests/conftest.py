"""Acceptance reporting: one pass/fail line per ``criterion``-marked test."""
import pytest

_RESULTS: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = report.failed
    if report.when == "call" or failed:
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties if k != "_")
        prev = _RESULTS.get(number)
        ok = not failed and (prev is None or prev[1])
        _RESULTS[number] = (title, ok, detail or (prev[2] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, detail = _RESULTS[number]
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number:>2} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
