import pytest

from nlsrace.config import load_config


@pytest.fixture(scope="session")
def default_cfg():
    return load_config()


@pytest.fixture(scope="session")
def det_cfg():
    return load_config(profile="deterministic")


@pytest.fixture(scope="session")
def reduced_cfg():
    return load_config(profile="reduced")


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    _CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _CRITERIA.items():
        label = name.replace("test_", "").split("_", 1)
        terminalreporter.write_line(f"criterion {label[0][1:]:<3} {label[1]:<22} {outcome.upper()}")
