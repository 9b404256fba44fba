import pytest

_outcomes: dict[int, tuple[str, str, float]] = {}
_details: dict[int, list[str]] = {}


@pytest.fixture
def detail(request):
    """Attach measured values to the criterion's summary line."""
    n = request.node.get_closest_marker("criterion").args[0]
    return _details.setdefault(n, []).append


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    n, title = marker
    # a failure in setup or call is final; a pass only counts from the call phase
    if report.failed or (report.when == "call" and n not in _outcomes):
        _outcomes[n] = ("FAIL" if report.failed else "PASS", title, report.duration)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = (marker.args[0], marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status, title, seconds = _outcomes[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}  ({seconds:.1f} s)")
        for line in _details.get(n, []):
            terminalreporter.write_line(f"    {line}")
