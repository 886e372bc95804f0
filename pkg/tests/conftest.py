import pytest

_LINES: list[str] = []


@pytest.fixture
def report(request):
    """Emit one acceptance result line, live and again in the terminal summary."""
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(n: int, ok: bool, detail: str) -> None:
        line = f"[ACCEPTANCE {n}] {'PASS' if ok else 'FAIL'} {detail}"
        _LINES.append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)
