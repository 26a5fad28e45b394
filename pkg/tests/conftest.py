"""Collects the outcome of every ``@pytest.mark.criterion`` test and prints
one PASS/FAIL/SKIP line per acceptance criterion after the run."""
import pytest

_OUTCOMES = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "status": "PASS", "details": []})
    if call.when == "call" or call.excinfo is not None:
        if call.excinfo is not None:
            entry["status"] = "SKIP" if call.excinfo.errisinstance(pytest.skip.Exception) else "FAIL"
        for key, value in item.user_properties:
            if key == "detail" and value not in entry["details"]:
                entry["details"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        e = _OUTCOMES[number]
        detail = f" -- {'; '.join(e['details'])}" if e["details"] else ""
        terminalreporter.write_line(f"[{e['status']}] criterion {number:>2}: {e['title']}{detail}")
