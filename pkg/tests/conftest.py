import pytest

REPORT = {}


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion."""
    def put(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        REPORT[number] = line
        print(line)
        return ok
    return put


def pytest_terminal_summary(terminalreporter):
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for number in sorted(REPORT):
            terminalreporter.write_line(REPORT[number])
