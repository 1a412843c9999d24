"""Shared test utilities: central finite differences and small random instances."""

import numpy as np

from qmimic import numcore as nc


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` w.r.t. ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return float(np.abs(a - b).max(initial=0) / scale)


def check_grads(build, arrays: dict, eps: float = 1e-6) -> float:
    """Compare autodiff and finite-difference gradients of ``build(**params) -> scalar Node``.

    Returns the worst relative error across all inputs.
    """
    params = {k: nc.parameter(v.astype(np.float64), k) for k, v in arrays.items()}
    loss = build(**params)
    nc.backward(loss)
    worst = 0.0
    for k, p in params.items():
        num = numeric_grad(lambda: float(build(**params).value), p.value, eps)
        worst = max(worst, rel_err(p.grad, num))
    return worst


def random_fm(rng, n=2, c=3, h=6, w=6) -> np.ndarray:
    # well-separated values keep max-pool argmaxes stable under perturbation
    vals = rng.permutation(n * c * h * w).astype(np.float64) * 0.1
    return vals.reshape(n, c, h, w)
