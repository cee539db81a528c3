import pytest
import torch

torch.set_num_threads(1)

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0][:160] if call.excinfo else "error"
    _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, duration, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}  ({duration:.1f} s)  {detail}")
