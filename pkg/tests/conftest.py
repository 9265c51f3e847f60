import pytest

from context_kernel.config import MEETING_SCENARIO, load_config

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        verdict = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {entry['title']}")


@pytest.fixture(scope="session")
def config():
    return load_config()


@pytest.fixture(scope="session")
def stack(config):
    """``(ontology, rules, mapping)`` from the bundled configuration."""
    return config.load_stack()


@pytest.fixture(scope="session")
def ontology(stack):
    return stack[0]


@pytest.fixture(scope="session")
def rules(stack):
    return stack[1]


@pytest.fixture(scope="session")
def mapping(stack):
    return stack[2]


@pytest.fixture(scope="session")
def meeting_scenario():
    return MEETING_SCENARIO
