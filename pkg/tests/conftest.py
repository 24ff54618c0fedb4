import numpy as np
import pytest

from cxrnet.tensor import Tensor

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def t64(a, requires_grad=True):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=requires_grad)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar probe ``sum(out * weights)`` so every output element matters."""
    return (out * Tensor(weights)).sum()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
