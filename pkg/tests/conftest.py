import numpy as np
import pytest

from rapidnet.tensor import Rng


def rel_err(actual: np.ndarray, expected: np.ndarray) -> float:
    """Max-abs difference scaled by the magnitude of the expected value."""
    denom = max(float(np.max(np.abs(expected))), 1e-8)
    return float(np.max(np.abs(actual - expected))) / denom


def fd_grad(loss_fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function, element by element."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = loss_fn(x)
        x[i] = old - h
        down = loss_fn(x)
        x[i] = old
        g[i] = (up - down) / (2.0 * h)
        it.iternext()
    return g


@pytest.fixture
def rng():
    return Rng(1234)
