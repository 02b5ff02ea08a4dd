import pytest


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``with acceptance("name") as note: ...; note("detail")``.
    """
    lines = request.config._acceptance_lines

    class _Criterion:
        def __init__(self, name):
            self.name, self.details = name, []

        def __enter__(self):
            return self.details.append

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            detail = "; ".join(self.details)
            if exc is not None:
                detail = f"{detail}; {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
            lines.append(f"[{status}] {self.name}: {detail.strip('; ')}")
            return False

    return _Criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
