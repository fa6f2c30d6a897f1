import pytest

from strsep import numerics as nx

_OUTCOMES: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.fixture(autouse=True)
def _finite_checks_on():
    nx.set_finite_checks(True)
    yield
    nx.set_finite_checks(True)


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker
    status = "PASS" if report.passed else "FAIL"
    detail = ""
    for name, content in report.user_properties:
        if name == "detail":
            detail = content
    _OUTCOMES[number] = (status, title, detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report.criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        status, title, detail = _OUTCOMES[number]
        line = f"criterion {number} {status}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
