import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance_lines = []


@pytest.fixture
def acceptance_report():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def report(cid, passed, detail):
        _acceptance_lines.append(f"ACCEPTANCE {cid} {'PASS' if passed else 'FAIL'}: {detail}")
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: s.split()[1]):
            terminalreporter.write_line(line)
