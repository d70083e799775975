import pytest

_LINES = pytest.StashKey[list]()


class Criterion:
    def __init__(self, lines):
        self.lines = lines
        self.recorded = False

    def record(self, ac: str, ok: bool, detail: str) -> bool:
        self.lines.append(f"{ac:<12} {'PASS' if ok else 'FAIL'}  {detail}")
        self.recorded = True
        return ok


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(_LINES, [])
    c = Criterion(lines)
    yield c
    if not c.recorded:
        lines.append(f"{request.node.name:<12} FAIL  raised before reaching its check")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
