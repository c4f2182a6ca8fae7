"""Acceptance bookkeeping: tests marked ``criterion(k, title)`` store their
measured quantities in the ``measured`` fixture, and the terminal summary
prints one PASS/FAIL line per criterion."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.fixture
def measured(request):
    marker = request.node.get_closest_marker("criterion")
    entry = _RESULTS.setdefault(marker.args[0], {"title": marker.args[1], "values": {}, "passed": None})
    return entry["values"]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    entry = _RESULTS.setdefault(marker.args[0], {"title": marker.args[1], "values": {}, "passed": None})
    entry["passed"] = rep.passed


def _fmt(v):
    return f"{v:.3e}" if isinstance(v, float) else str(v)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        entry = _RESULTS[k]
        status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[entry["passed"]]
        detail = ", ".join(f"{name} = {_fmt(v)}" for name, v in entry["values"].items())
        terminalreporter.write_line(f"criterion {k:2d} {status}: {entry['title']}" + (f" ({detail})" if detail else ""))
