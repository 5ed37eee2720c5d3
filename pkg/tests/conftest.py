import pytest

_RESULTS: list[tuple[str, bool, str]] = []


class Criterion:
    """Records one acceptance line; ``check`` asserts after recording."""

    def __init__(self, name: str):
        self.name = name

    def check(self, ok: bool, detail: str) -> None:
        _RESULTS.append((self.name, bool(ok), detail))
        assert ok, f"{self.name}: {detail}"


@pytest.fixture
def criterion(request):
    return Criterion(request.node.name)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
