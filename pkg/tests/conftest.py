import numpy as np
import pytest

from fairgraph import tensor as tt


def numeric_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fn(x)
        x[i] = old - h
        down = fn(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-2)
    return float(np.abs(a - b).max() / scale)


def check_grad(build, arrays: list, tol: float = 1e-5) -> float:
    """``build(*tensors) -> scalar Tensor``; returns the worst relative error over all inputs."""
    leaves = [tt.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*leaves)
    tt.backward(loss)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f(x, k=k):
            args = [tt.Tensor(a) for a in arrays]
            args[k] = tt.Tensor(x)
            return build(*args).item()
        num = numeric_grad(f, arrays[k].copy())
        worst = max(worst, rel_err(leaf.grad, num))
    assert worst < tol, worst
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
