"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn().item()
        flat[i] = orig - h
        minus = fn().item()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-12) over all entries."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6
) -> float:
    """Relative error between backprop and finite differences over all of ``params``.

    The error is ``max |a - n|`` over every entry divided by the largest
    gradient magnitude, so parameters whose true gradient is zero (e.g. a
    key bias under softmax) are judged against the scale of the whole
    gradient rather than against their own rounding noise. ``fn`` must
    rebuild the scalar output from scratch on every call.
    """
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = [numerical_grad(fn, p, h) for p in params]
    return relative_error(
        np.concatenate([a.reshape(-1) for a in analytic]),
        np.concatenate([n.reshape(-1) for n in numeric]),
    )
