import pytest

# criterion number -> (title, outcome, seconds)
_CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        result = "PASS" if report.passed else "FAIL"
        _CRITERIA[number] = (title, result, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, result, seconds = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {result}  ({seconds:6.2f}s)  {title}")
