from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

import pytest

_CRITERIA: dict[int, list] = {}
_DETAILS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def report(request):
    """Attach a measured value to the current criterion's summary line."""
    mark = request.node.get_closest_marker("criterion")

    def add(text):
        _DETAILS.setdefault(mark.args[0], []).append(text)

    return add


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if hasattr(report, "wasxfail"):
            outcome = "xfail"
        else:
            outcome = report.outcome
        _CRITERIA.setdefault(n, []).append((report.nodeid.split("::")[-1], outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        ok = all(o == "passed" for _, o in results)
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}"
        notes = [f"{name} {o}" for name, o in results if o != "passed"]
        notes += _DETAILS.get(n, [])
        if notes:
            line += "  (" + "; ".join(notes) + ")"
        terminalreporter.write_line(line)
