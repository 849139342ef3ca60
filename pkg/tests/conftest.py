import pytest

# one line per acceptance criterion, shown in the terminal summary so the
# pass/fail verdicts survive pytest's output capture
_CRITERION_LINES = []


def record_criterion(num: int, ok: bool, detail: str) -> str:
    line = f"[criterion {num:>2}] {'PASS' if ok else 'FAIL'}: {detail}"
    _CRITERION_LINES.append(line)
    print(line)
    return line


@pytest.fixture
def criterion():
    def check(num, ok, detail):
        line = record_criterion(num, bool(ok), detail)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERION_LINES:
            terminalreporter.write_line(line)
