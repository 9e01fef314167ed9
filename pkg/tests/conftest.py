import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, summary): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label, summary = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _results[label] = (status, summary, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_results, key=lambda s: int(s[2:])):
        status, summary, duration = _results[label]
        terminalreporter.write_line(f"{label} {status}  {summary}  ({duration:.2f}s)")
