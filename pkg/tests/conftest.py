import pytest

CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one verdict line per acceptance criterion and echo it."""
    def report(number, title, ok, detail=""):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip()
        CRITERIA[(number, title)] = line
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[key])
