import pytest

_CRITERIA = {}


@pytest.fixture(scope="session")
def criteria():
    """Acceptance tests record (passed, detail) here for the end-of-run summary."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        ok, detail = _CRITERIA[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
