"""Per-criterion PASS/FAIL summary for tests marked ``criterion``."""

import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _results.setdefault(number, {"title": title, "passed": True, "seconds": 0.0, "tests": 0, "details": []})
    entry["seconds"] += report.duration   # setup counts too: module fixtures may do the heavy work
    if report.when == "call":
        entry["tests"] += 1
        entry["details"] += [value for key, value in item.user_properties if key == "detail"]
    if report.failed:
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        r = _results[number]
        status = "PASS" if r["passed"] and r["tests"] else "FAIL"
        terminalreporter.write_line(f"CRITERION {number:2d}: {status}  {r['title']}  ({r['seconds']:.1f} s)")
        for detail in r["details"]:
            terminalreporter.write_line(f"    {detail}")
