"""Finite-difference verification of analytic gradients.

``check_gradients`` evaluates a scalar-producing closure twice per parameter
element (central differences) and compares against the reverse-mode result.
The closure must be deterministic: stochastic forwards should replay a fixed
:class:`~crosstask.rng.RngStream` on every call so the noise is identical.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max over elements of |a - n| / max(|a|, |n|, 1).

    Behaves as absolute error for small entries and relative error for large
    ones, which keeps finite-difference noise on near-zero gradients from
    dominating the comparison.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor,
                     step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``fn()`` w.r.t. one tensor's values."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        hi = float(fn().data)
        flat[i] = saved - step
        lo = float(fn().data)
        flat[i] = saved
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    step: float = 1e-5) -> float:
    """Return the worst relative error across ``tensors``.

    Runs one analytic backward pass, then finite differences per tensor.
    """
    for t in tensors:
        t.zero_grad()
    value = fn()
    value.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = numeric_gradient(fn, t, step=step)
        worst = max(worst, relative_error(a, n))
    return worst
