import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(k, title, ok, detail)`` records one acceptance line; the test asserts on ``ok``."""
    def record(k: int, title: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA[k] = (title, bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d}. {title}: {detail}")
