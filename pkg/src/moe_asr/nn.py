"""Parameter containers and the small layers the models are assembled from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .errors import DimensionError
from .rng import RngStream
from .tensor import Tensor, dropout, layer_norm, lstm_cell, mac_tag, matmul, stack


class Module:
    """Base class: any Tensor attribute with ``requires_grad`` is a parameter.

    Parameters are discovered through attribute insertion order, which keeps
    parameter paths and iteration order stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != parameter {p.shape}")
            p.data = value.copy()


def uniform_init(rng: RngStream, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngStream, bias: bool = True) -> None:
        self.weight = uniform_init(rng.spawn("weight"), d_in, (d_in, d_out))
        self.bias = uniform_init(rng.spawn("bias"), d_in, (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int) -> None:
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: RngStream) -> None:
        self.weight = Tensor(rng.normal((num, dim), scale=dim**-0.5), requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return self.weight[np.asarray(ids, dtype=np.int64)]


class FeedForward(Module):
    """linear -> ReLU -> dropout -> linear."""

    def __init__(self, d_model: int, d_ff: int, dropout_p: float, rng: RngStream) -> None:
        self.inner = Linear(d_model, d_ff, rng.spawn("inner"))
        self.outer = Linear(d_ff, d_model, rng.spawn("outer"))
        self.dropout_p = dropout_p

    @property
    def d_model(self) -> int:
        return self.inner.weight.shape[0]

    def __call__(self, x: Tensor, rng: RngStream | None = None, training: bool = False) -> Tensor:
        h = self.inner(x).relu()
        h = dropout(h, self.dropout_p, rng, training)
        return self.outer(h)


class LSTMLayer(Module):
    def __init__(self, d_in: int, hidden: int, rng: RngStream) -> None:
        self.w_input = uniform_init(rng.spawn("w_input"), hidden, (d_in, 4 * hidden))
        self.w_hidden = uniform_init(rng.spawn("w_hidden"), hidden, (hidden, 4 * hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0  # open forget gate at init
        self.bias = Tensor(bias, requires_grad=True)
        self.hidden = hidden

    def initial_state(self, batch: int) -> tuple[Tensor, Tensor]:
        return Tensor(np.zeros((batch, self.hidden))), Tensor(np.zeros((batch, self.hidden)))

    def step(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        return lstm_cell(x, state[0], state[1], self.w_input, self.w_hidden, self.bias)

    def __call__(self, x: Tensor) -> Tensor:
        """Run over ``B x U x d_in`` and return all hidden states ``B x U x hidden``."""
        state = self.initial_state(x.shape[0])
        outputs = []
        with mac_tag("lstm"):
            for u in range(x.shape[1]):
                state = self.step(x[:, u], state)
                outputs.append(state[0])
        return stack(outputs, axis=1)
