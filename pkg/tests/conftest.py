import numpy as np
import pytest

from mfg_forge.autodiff import tape


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at flat array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def fd():
    return central_diff


@pytest.fixture
def rel_err():
    return max_rel_err


def scalar_of(fn):
    """Evaluate a tape computation on a plain array and return a float."""
    return lambda x: float(np.asarray(fn(tape.as_var(x)).value))
