import numpy as np
import pytest


def fd_grad(f, x, h=1e-5):
    """Central differences of scalar f() w.r.t. array x (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return np.linalg.norm(a - b) / scale if scale > 0 else np.linalg.norm(a - b)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
