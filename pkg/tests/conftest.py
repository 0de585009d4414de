import numpy as np
import pytest

from unlearn_lab import autodiff as ad
from unlearn_lab.autodiff import Tensor


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = fn(x)
        x[i] = old - eps
        lo = fn(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def analytic_grads(build, arrays):
    """Gradients of ``sum(build(*tensors) * probe)`` for each input array.

    A fixed random probe weights the output so every element contributes.
    """
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*ts)
    probe = np.random.default_rng(99).standard_normal(out.shape)
    ad.backward(ad.tsum(ad.mul(out, probe)))
    return [t.grad for t in ts], probe


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def gradcheck(build, arrays, eps: float = 1e-5) -> float:
    """Largest relative error between analytic and finite-difference gradients."""
    grads, probe = analytic_grads(build, arrays)
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [Tensor(v if j == k else arrays[j]) for j in range(len(arrays))]
            return float(np.sum(build(*args).data * probe))
        worst = max(worst, rel_err(grads[k], numeric_grad(f, a, eps)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
