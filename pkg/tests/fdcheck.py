"""Shared finite-difference oracle used across the test suite.

The oracle is deliberately independent of the library's own checker: it
perturbs raw numpy arrays in place and differences plain floats.
"""

import numpy as np

from edit.tensor import Tensor, backward, mul, sum_all


def fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of float-valued f() with respect to x.

    f must read x by reference so in-place perturbation is visible."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        lp = f()
        flat[j] = orig - h
        lm = f()
        flat[j] = orig
        out[j] = (lp - lm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def check_vjp(op, arrays, tol: float = 1e-5, rng=None, **kw) -> float:
    """Assert that backward() through `op` matches finite differences.

    Builds loss = sum(op(*tensors) * w) with a random cotangent w so every
    output coordinate participates. Returns the worst relative error."""
    rng = np.random.default_rng(0) if rng is None else rng
    params = [Tensor(a, requires_grad=True) for a in arrays]
    w = rng.standard_normal(op(*params, **kw).shape)

    def loss():
        return sum_all(mul(op(*params, **kw), w))

    analytic = backward(loss(), wrt=params)
    worst = 0.0
    for p, a in zip(params, analytic):
        numeric = fd_grad(lambda: loss().item(), p.values)
        err = rel_err(a, numeric).max() if a.size else 0.0
        assert err < tol, f"reverse rule off by {err:.3e} (tol {tol:.1e})"
        worst = max(worst, float(err))
    return worst
