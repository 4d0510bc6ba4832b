import numpy as np
import pytest
import torch

from mbj.data import make_synthetic_embeddings


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def two_blobs():
    """Two well separated classes, 200 samples each."""
    train = make_synthetic_embeddings(2, 8, [200, 200], within_class_scale=0.1, seed=3)
    test = make_synthetic_embeddings(2, 8, [100, 100], within_class_scale=0.1, seed=4, class_means=train.class_means)
    return train, test


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record one acceptance verdict; the lines are printed at the end of the session."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
