import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.call_report = rep


@pytest.fixture
def criterion(request):
    """Record a one-line acceptance verdict; the test outcome decides PASS or FAIL."""
    marker = request.node.get_closest_marker("criterion")
    num = marker.args[0]
    notes: list[str] = []
    yield notes.append
    rep = getattr(request.node, "call_report", None)
    if rep is not None and rep.skipped:
        verdict = "SKIP"
    elif rep is not None and rep.passed:
        verdict = "PASS"
    else:
        verdict = "FAIL"
    line = f"criterion {num:2d}: {verdict}  {marker.args[1]}" + (f"  [{'; '.join(notes)}]" if notes else "")
    ACCEPTANCE_LINES[num] = line
    print("\n" + line)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[num])
