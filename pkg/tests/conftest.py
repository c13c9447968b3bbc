import pytest

_criteria: dict[int, str] = {}


@pytest.fixture
def record():
    """record(n, ok, detail) stores the one-line verdict for acceptance criterion n."""
    def _record(n, ok, detail):
        _criteria[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_criteria[n])
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_criteria):
            terminalreporter.write_line(_criteria[n])
