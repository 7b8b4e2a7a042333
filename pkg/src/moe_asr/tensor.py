"""Dense float64 tensors with a reverse-mode gradient tape.

Every op builds a node holding its parents and a closure mapping the output
gradient to parent gradients. ``Tensor.backward`` walks the graph in reverse
topological order. Gradients accumulate into ``.grad`` across calls, so the
backward of ``a + b`` equals backward(a) followed by backward(b).
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, ParameterError

_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


# --------------------------------------------------------------------------
# multiply-accumulate instrumentation


class MacCounter:
    """Tallies matmul multiply-accumulates by tag while active."""

    def __init__(self) -> None:
        self.counts: dict[str, int] = {}

    def add(self, tag: str, macs: int) -> None:
        self.counts[tag] = self.counts.get(tag, 0) + macs

    def __getitem__(self, tag: str) -> int:
        return self.counts.get(tag, 0)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    prev = getattr(_local, "counter", None)
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


@contextmanager
def mac_tag(tag: str) -> Iterator[None]:
    prev = getattr(_local, "tag", "other")
    _local.tag = tag
    try:
        yield
    finally:
        _local.tag = prev


def _record_macs(macs: int) -> None:
    counter = getattr(_local, "counter", None)
    if counter is not None:
        counter.add(getattr(_local, "tag", "other"), macs)


# --------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x: Tensor | float | np.ndarray) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """An n-dimensional float64 array that can participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers ------------------------------------------------

    @classmethod
    def _make(
        cls,
        data: np.ndarray,
        parents: tuple[Tensor, ...],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ) -> Tensor:
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @staticmethod
    def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    # -- array protocol ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ------------------------------------------------------------

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape).copy()

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> Tensor:
        return _as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other) -> Tensor:
        return _as_tensor(other) / self

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> Tensor:
        a = self.data
        return Tensor._make(
            a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),)
        )

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        return take(self, index)

    # -- shape ---------------------------------------------------------------

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes: int) -> Tensor:
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    def swapaxes(self, a: int, b: int) -> Tensor:
        return Tensor._make(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    @property
    def T(self) -> Tensor:
        return self.transpose()

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        src = self.shape

        def backward(g: np.ndarray):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise ---------------------------------------------------------

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self) -> Tensor:
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def relu(self) -> Tensor:
        keep = self.data > 0
        return Tensor._make(self.data * keep, (self,), lambda g: (g * keep,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branches keep exp() from overflowing; saturates to exactly 0 or 1.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# free functions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _record_macs(out.size * a.shape[-1])
    ad, bd = a.data, b.data

    def backward(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(out, (a, b), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; advanced indices scatter-add on the way back."""
    if isinstance(index, Tensor):
        raise TypeError("index with integer arrays, not Tensors")
    src = x.shape
    basic = _is_basic_index(index)

    def backward(g: np.ndarray):
        full = np.zeros(src)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(x.data[index], (x,), backward)


def scatter_rows(values: Tensor, rows: np.ndarray, num_rows: int) -> Tensor:
    """Place ``values[i]`` at output row ``rows[i]``; untouched rows are zero.

    ``rows`` must be distinct.
    """
    out = np.zeros((num_rows,) + values.shape[1:])
    out[rows] = values.data
    return Tensor._make(out, (values,), lambda g: (g[rows],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    n = len(tensors)
    return Tensor._make(
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def where(cond: np.ndarray, a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor._make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    return x.relu()


def masked_softmax(x: Tensor, allowed: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` over entries where ``allowed`` is true.

    Disallowed entries get probability exactly 0. A slice with no allowed
    entry yields all zeros instead of NaN.
    """
    z = x.data
    if allowed is None:
        shifted = z - z.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
    else:
        allowed = np.broadcast_to(allowed, z.shape)
        masked = np.where(allowed, z, -np.inf)
        peak = masked.max(axis=axis, keepdims=True)
        peak = np.where(np.isfinite(peak), peak, 0.0)
        e = np.where(allowed, np.exp(np.where(allowed, z, 0.0) - peak), 0.0)
        denom = e.sum(axis=axis, keepdims=True)
        out = e / np.where(denom > 0, denom, 1.0)

    def backward(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    return masked_softmax(x, None, axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g: np.ndarray):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm gain {gain.shape} / bias {bias.shape} must match last axis of {x.shape}"
        )
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    centered = a - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    w = gain.data

    def backward(g: np.ndarray):
        gx_hat = g * w
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(a.ndim - 1))
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return Tensor._make(xhat * w + bias.data, (x, gain, bias), backward)


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 1
) -> Tensor:
    """2-D cross-correlation with symmetric zero padding.

    ``x`` is ``C_in x H x W`` or batched ``B x C_in x H x W``; ``weight`` is
    ``C_out x C_in x kh x kw``.
    """
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or weight.ndim != 4 or weight.shape[1] != xd.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernels {weight.shape}")
    _, _, height, width = xd.shape
    c_out, _, kh, kw = weight.shape
    ph, pw = height + 2 * padding, width + 2 * padding
    if height < 1 or width < 1 or ph < kh or pw < kw:
        raise DimensionError(
            f"conv2d input {x.shape} too small for kernel {(kh, kw)} with padding {padding}"
        )
    ho = (ph - kh) // stride + 1
    wo = (pw - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data

    def window(i: int, j: int) -> tuple[slice, slice, slice, slice]:
        return (
            slice(None),
            slice(None),
            slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride),
        )

    out = np.zeros((xd.shape[0], c_out, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("bchw,oc->bohw", xp[window(i, j)], wd[:, :, i, j], optimize=True)
    _record_macs(out.size * wd.shape[1] * kh * kw)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        g4 = g[None] if unbatched else g
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                win = window(i, j)
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g4, xp[win], optimize=True)
                gxp[win] += np.einsum("bohw,oc->bchw", g4, wd[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding : padding + height, padding : padding + width]
        if unbatched:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out[0] if unbatched else out, parents, backward)


def conv_output_extent(extent: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def lstm_cell(
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    w_input: Tensor,
    w_hidden: Tensor,
    bias: Tensor,
) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate blocks along the last axis are ordered input, forget, cell, output."""
    hidden = h_prev.shape[-1]
    if w_input.shape != (x.shape[-1], 4 * hidden) or w_hidden.shape != (hidden, 4 * hidden):
        raise DimensionError(
            f"lstm weights {w_input.shape}, {w_hidden.shape} inconsistent with input "
            f"{x.shape} and hidden size {hidden}"
        )
    z = matmul(x, w_input) + matmul(h_prev, w_hidden) + bias
    i = z[..., :hidden].sigmoid()
    f = z[..., hidden : 2 * hidden].sigmoid()
    g = z[..., 2 * hidden : 3 * hidden].tanh()
    o = z[..., 3 * hidden :].sigmoid()
    c = f * c_prev + i * g
    h = o * c.tanh()
    return h, c


def dropout(x: Tensor, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout: zero with probability p and rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    scale = keep / (1.0 - p)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,))


def sum_all(tensors: Iterable[Tensor]) -> Tensor:
    total: Tensor | None = None
    for t in tensors:
        total = t if total is None else total + t
    return total if total is not None else Tensor(0.0)
