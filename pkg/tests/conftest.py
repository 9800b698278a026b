import pytest

_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LINES] = {}


@pytest.fixture
def report(request):
    """Record one pass/fail line for an acceptance criterion."""
    lines = request.config.stash[_LINES]

    def record(number, name, ok, detail):
        lines[number] = f"criterion {number:>2}  {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(lines[number])

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
