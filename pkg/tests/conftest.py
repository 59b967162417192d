import pytest

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_KEY] = {}


@pytest.fixture
def criterion(request, capsys):
    """``criterion(n, ok, detail)`` prints and stores one PASS/FAIL line."""
    lines = request.config.stash[_KEY]

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[_KEY]
    if lines:
        terminalreporter.section("acceptance")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
