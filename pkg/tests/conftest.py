import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion (plus optional detail lines)."""
    results = request.config.stash[_RESULTS]

    def record(number: int, title: str, passed: bool, detail: str, extra: list[str] | None = None) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {title}: {detail}"
        print(line)
        for e in extra or []:
            print("    " + e)
        results.append((number, line, list(extra or [])))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for _, line, extra in sorted(results, key=lambda r: r[0]):
        terminalreporter.write_line(line)
        for e in extra:
            terminalreporter.write_line("    " + e)
