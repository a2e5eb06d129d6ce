# (criterion, passed, detail) lines recorded by test_acceptance.py
CRITERIA: list = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    CRITERIA.append((criterion, passed, detail))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")
