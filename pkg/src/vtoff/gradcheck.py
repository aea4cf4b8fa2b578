"""Finite-difference validation of analytic gradients.

Central differences at 64-bit are the independent oracle for every
differentiable kernel; gradients are compared elementwise with a relative
error floor so near-zero entries do not dominate.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def finite_difference_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` w.r.t. array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, reference: np.ndarray,
                       floor: float = 1e-2) -> float:
    """Elementwise |a - r| / max(|a|, |r|, floor), reduced to the maximum."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(reference)), floor)
    return float(np.max(np.abs(analytic - reference) / denom))


def check_gradients(fn, inputs: list[np.ndarray], h: float = 1e-5,
                    rel_tol: float = 1e-3) -> float:
    """Compare analytic and finite-difference gradients of ``fn``.

    ``fn`` maps a list of Tensors to a scalar Tensor.  Returns the worst
    relative error over all inputs; raises AssertionError past ``rel_tol``.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    loss = fn(leaves)
    backward(loss)

    worst = 0.0
    for j, (leaf, x) in enumerate(zip(leaves, inputs)):
        def scalar(xj, j=j):
            args = [Tensor(v.copy()) for v in inputs]
            args[j] = Tensor(np.asarray(xj, dtype=np.float64))
            return fn(args).item()

        fd = finite_difference_grad(scalar, x, h=h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
        err = max_relative_error(analytic, fd)
        worst = max(worst, err)
        if err >= rel_tol:
            raise AssertionError(
                f"gradient check failed on input {j}: rel err {err:.3e} >= {rel_tol:.0e}")
    return worst
