import random

import pytest

from branchstore import ChunkerConfig, MemoryStore


@pytest.fixture
def store():
    return MemoryStore()


@pytest.fixture
def rng():
    return random.Random(20240601)


@pytest.fixture
def small_config():
    # small nodes so modest fixtures still grow several levels
    return ChunkerConfig(k=8, q=6)


def random_entries(rng, n, key_len=12, value_len=20):
    out = {}
    while len(out) < n:
        out[rng.randbytes(key_len)] = rng.randbytes(value_len)
    return out


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Append a one-line acceptance verdict, printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])
    return lines.append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
