import numpy as np
import pytest

from iwgae.types import Dataset


def make_dataset(logits, labels=None, domain="source", features=None, iw_score=None, prefix="s"):
    logits = np.asarray(logits, dtype=float)
    n = logits.shape[0]
    split = "validation" if domain == "source" else "test"
    return Dataset(ids=[f"{prefix}{i}" for i in range(n)], domain=[domain] * n, split=[split] * n,
                   labels=np.full(n, -1) if labels is None else labels, logits=logits,
                   features=features, iw_score=iw_score)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = {}


def record(n, passed, detail):
    """Store a one-line acceptance verdict; the terminal summary prints them in order."""
    line = f"ACCEPTANCE {n}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
