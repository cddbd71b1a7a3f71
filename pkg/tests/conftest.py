import pytest

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict = {}


@pytest.fixture
def record():
    def _record(number, title, ok, detail=""):
        ACCEPTANCE[number] = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(ACCEPTANCE[number])
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
