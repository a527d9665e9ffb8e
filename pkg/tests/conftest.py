"""Collects one PASS/FAIL line per acceptance criterion and prints them after the run."""

import pytest

_results = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config.stash[_results] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return report
    number, title = marker.args
    seen = item.config.stash[_results]
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        details = [v for k, v in item.user_properties if k == "detail"]
        prev = seen.get(number)
        ok = not failed and (prev is None or prev[1])
        if prev is not None and prev[2]:
            details.insert(0, prev[2])
        seen[number] = (title, ok, "; ".join(details))
    return report


@pytest.fixture
def detail(record_property):
    """Attach a short measurement to the criterion line."""

    def add(text: str) -> None:
        record_property("detail", text)

    return add


def pytest_terminal_summary(terminalreporter, config):
    seen = config.stash[_results]
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(seen):
        title, ok, info = seen[number]
        line = f"criterion {number:2d}  {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({info})" if info else ""))
