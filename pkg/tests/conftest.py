"""Acceptance bookkeeping: tests marked ``criterion(n, name)`` are grouped and
summarised as one pass/fail line per criterion at the end of the session."""

from collections import OrderedDict

import pytest

_RESULTS: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n, name = mark.args
        entry = _RESULTS.setdefault(n, {"name": name, "ok": True, "tests": [], "details": []})
        entry["ok"] &= rep.passed
        entry["tests"].append((item.name, rep.outcome))
        entry["details"] += [v for k, v in rep.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        e = _RESULTS[n]
        failed = [t for t, o in e["tests"] if o != "passed"]
        status = "PASS" if e["ok"] else "FAIL"
        tail = f" (failed: {', '.join(failed)})" if failed else ""
        tr.write_line(f"criterion {n:>2} {status}: {e['name']}{tail}")
        for d in e["details"]:
            tr.write_line(f"    {d}")
