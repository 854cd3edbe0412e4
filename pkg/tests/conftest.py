import numpy as np
import pytest


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar function ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def gradcheck(loss_fn, arrays, h: float = 1e-6) -> float:
    """Worst relative error between analytic and numeric gradients.

    ``loss_fn()`` builds a scalar Tensor from ``arrays``, which are the
    ``.data`` buffers of leaf tensors/parameters (edited in place).
    """
    leaves = arrays
    for t in leaves:
        t.grad = None if not hasattr(t, "zero_grad") else np.zeros_like(t.data)
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in leaves:
        num = numeric_grad(lambda: loss_fn().item(), t.data, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
