import pytest

from securedirect.ids import default_signatures


@pytest.fixture(scope="session")
def db():
    return default_signatures()


ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    number = getattr(item.function, "criterion", None)
    if number is None or call.when != "call":
        return
    status = "PASS" if call.excinfo is None else "FAIL"
    ACCEPTANCE_RESULTS[number] = (status, item.function.__doc__.strip().splitlines()[0])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        status, title = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title}")
