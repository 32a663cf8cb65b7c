import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(label): release acceptance criterion")
    config._acceptance_lines = []
    config._acceptance_details = {}


@pytest.fixture
def acceptance_detail(request):
    """Lets a criterion test attach a short result string to its summary line."""
    def record(text):
        request.config._acceptance_details[request.node.nodeid] = text
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when != "call":
        return
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    label = marker.kwargs.get("label") or item.name
    if rep.passed:
        status = "PASS"
    elif rep.skipped:
        status = "SKIP"
    else:
        status = "FAIL"
    detail = item.config._acceptance_details.get(item.nodeid, "")
    line = f"{status} {label}" + (f" [{detail}]" if detail else "")
    item.config._acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
