import pytest

_RESULTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the run summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = next((v for k, v in item.user_properties if k == "detail"), "")
        _RESULTS.append((marker.args[0], "PASS" if rep.passed else "FAIL", rep.duration, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, seconds, detail in _RESULTS:
        terminalreporter.write_line(f"{status}  {name}  ({seconds:.1f} s)  {detail}".rstrip())
