import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ms2edge.network import NetworkSpec, build  # noqa: E402


@pytest.fixture
def tiny_net():
    """Smallest legal network: stage widths 8..64, hidden widths divisible by 4."""
    return build(NetworkSpec(width=0.125, T=1, seed=0))


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
