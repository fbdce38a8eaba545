import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def acceptance(request):
    """Record ``(number, ok, detail)`` for the end-of-run criteria table."""
    table = request.config.stash[_RESULTS]

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        table[number] = line
        print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash[_RESULTS]
    if table:
        terminalreporter.section("acceptance criteria")
        for k in sorted(table):
            terminalreporter.write_line(table[k])
