import pytest

CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """Record the verdict line for one acceptance criterion; shown in the terminal summary."""
    lines = request.config.stash[CRITERIA]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[CRITERIA]
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
