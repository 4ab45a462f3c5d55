import pytest

_LINES: list[str] = []
_REPORTED: set[str] = set()
_FAILED: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion as a PASS/FAIL line, then assert it."""
    def record(name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _LINES.append(line)
        _REPORTED.add(request.node.nodeid)
        print(line)
        assert ok, line
    return record


def pytest_runtest_logreport(report):
    if report.when == "call" and report.failed and "test_acceptance" in report.nodeid:
        _FAILED.append(report.nodeid)


def pytest_terminal_summary(terminalreporter):
    missing = [n for n in _FAILED if n not in _REPORTED]
    if not _LINES and not missing:
        return
    terminalreporter.section("acceptance criteria")
    for line in _LINES:
        terminalreporter.write_line(line)
    for nodeid in missing:
        terminalreporter.write_line(f"[FAIL] {nodeid}: raised before reaching its check")
