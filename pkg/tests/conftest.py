import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(number, text, ok, detail)`` records one acceptance verdict line."""
    lines = request.config.stash.setdefault(_LINES, [])

    def report(number, text, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}" + (f" | {detail}" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
