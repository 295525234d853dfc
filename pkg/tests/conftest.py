import pytest

_ACCEPTANCE = []


class AcceptanceLog:
    """Collects one pass/fail line per acceptance criterion."""

    def record(self, criterion, passed, detail):
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        print(f"[acceptance] criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"criterion {criterion:<3} {'PASS' if passed else 'FAIL'}  {detail}")
