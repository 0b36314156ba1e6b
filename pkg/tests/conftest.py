import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, name, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if passed else 'FAIL'}: {name} | {detail}")


@pytest.fixture
def acceptance():
    def record(n, name, passed, detail=""):
        ACCEPTANCE[n] = (bool(passed), name, detail)
        print(f"criterion {n} {'PASS' if passed else 'FAIL'}: {name} | {detail}")
        return passed
    return record
