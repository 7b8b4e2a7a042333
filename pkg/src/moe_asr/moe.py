"""Switch (top-1) mixture-of-experts routing.

A gating network scores every token against ``N`` experts. Each token goes to
its single highest-probability expert, whose output is scaled by that
probability. Experts hold at most ``capacity`` tokens per batch; tokens that
arrive after their expert filled up are dropped, the layer emits zero for them
and the surrounding residual connection carries them forward unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DimensionError, ParameterError
from .nn import FeedForward, Module, uniform_init
from .rng import RngStream
from .tensor import Tensor, concat, mac_tag, matmul, scatter_rows, softmax

DROPPED = -1


@dataclass(frozen=True)
class RouterConfig:
    num_experts: int = 4
    capacity_factor: float = 1.5
    alpha: float = 0.01
    jitter_eps: float = 0.01
    top_k: int = 1

    def __post_init__(self) -> None:
        if self.num_experts < 1:
            raise ParameterError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.capacity_factor <= 0:
            raise ParameterError(f"capacity_factor must be positive, got {self.capacity_factor}")
        if not 0.0 <= self.jitter_eps < 1.0:
            raise ParameterError(f"jitter_eps must lie in [0, 1), got {self.jitter_eps}")
        if self.top_k != 1:
            raise ParameterError("only switch routing (top_k = 1) is supported")


@dataclass(frozen=True)
class DispatchPlan:
    """Per-token routing decisions for one batch.

    ``assignment[t]`` is the expert index or ``DROPPED``; ``slot[t]`` is the
    token's position in that expert's buffer (``-1`` when dropped).
    """

    assignment: np.ndarray
    slot: np.ndarray
    gate_value: np.ndarray
    capacity: int

    @property
    def num_tokens(self) -> int:
        return len(self.assignment)

    @property
    def dropped_count(self) -> int:
        return int((self.assignment == DROPPED).sum())

    @property
    def assigned_count(self) -> int:
        return self.num_tokens - self.dropped_count

    def tokens_for(self, expert: int) -> np.ndarray:
        """Token indices held by ``expert``, in slot order."""
        idx = np.flatnonzero(self.assignment == expert)
        return idx[np.argsort(self.slot[idx], kind="stable")]


@dataclass
class LoadStats:
    """Batch routing statistics.

    ``f`` is the fraction of tokens whose argmax is each expert (a constant),
    ``P`` the mean router probability per expert (on the tape).
    """

    f: np.ndarray
    P: Tensor
    T: int
    dropped: int = 0
    capacity: int = 0
    alpha: float = 0.01
    choice: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)

    def to_record(self) -> dict:
        return {
            "f": [float(v) for v in self.f],
            "P": [float(v) for v in self.P.data],
            "tokens": self.T,
            "dropped": self.dropped,
            "capacity": self.capacity,
        }


def expert_capacity(samples_per_batch: int, num_experts: int, capacity_factor: float) -> int:
    """ceil(samples / experts * factor), at least 1.

    The factor goes through its decimal string so that e.g. 1.1 is not
    rounded up by binary representation error.
    """
    if num_experts < 1:
        raise ParameterError(f"num_experts must be >= 1, got {num_experts}")
    if samples_per_batch < 1 or capacity_factor <= 0:
        raise ParameterError(
            f"samples_per_batch and capacity_factor must be positive, got "
            f"{samples_per_batch}, {capacity_factor}"
        )
    exact = Fraction(samples_per_batch, num_experts) * Fraction(str(capacity_factor))
    return max(1, math.ceil(exact))


def apply_jitter(x: Tensor, eps: float, rng: RngStream | None, training: bool) -> Tensor:
    """Multiply every element by an independent draw from uniform(1 - eps, 1 + eps)."""
    if not training or eps == 0.0:
        return x
    return x * rng.uniform(1.0 - eps, 1.0 + eps, x.shape)


def gate(x: Tensor, gate_weights: Tensor) -> Tensor:
    """Router probabilities ``softmax(x @ W)`` per row."""
    if x.ndim != 2 or gate_weights.ndim != 2 or x.shape[1] != gate_weights.shape[0]:
        raise DimensionError(f"gate shape mismatch: tokens {x.shape}, weights {gate_weights.shape}")
    with mac_tag("gate"):
        logits = matmul(x, gate_weights)
    return softmax(logits, axis=-1)


def plan_dispatch(gate_probs: Tensor | np.ndarray, capacity: int) -> DispatchPlan:
    """Route each token to its argmax expert in arrival order.

    Ties go to the lowest expert index. A token whose expert is already full
    is dropped; it is not offered to its second choice.
    """
    if capacity < 1:
        raise ParameterError(f"capacity must be >= 1, got {capacity}")
    probs = gate_probs.data if isinstance(gate_probs, Tensor) else np.asarray(gate_probs)
    choice = np.argmax(probs, axis=1)
    n_tokens = len(choice)
    order = np.argsort(choice, kind="stable")
    sorted_choice = choice[order]
    group_start = np.searchsorted(sorted_choice, sorted_choice, side="left")
    rank = np.empty(n_tokens, dtype=np.int64)
    rank[order] = np.arange(n_tokens) - group_start

    kept = rank < capacity
    assignment = np.where(kept, choice, DROPPED)
    slot = np.where(kept, rank, -1)
    gate_value = probs[np.arange(n_tokens), choice]
    return DispatchPlan(assignment, slot, gate_value, capacity)


def load_stats(gate_probs: Tensor, plan: DispatchPlan | None = None, alpha: float = 0.01) -> LoadStats:
    """Dispatch fractions ``f`` (by argmax, ignoring capacity) and mean probabilities ``P``."""
    n_tokens, n_experts = gate_probs.shape
    choice = np.argmax(gate_probs.data, axis=1)
    f = np.bincount(choice, minlength=n_experts) / n_tokens
    P = gate_probs.mean(axis=0)
    dropped = plan.dropped_count if plan is not None else 0
    capacity = plan.capacity if plan is not None else 0
    return LoadStats(f, P, n_tokens, dropped, capacity, alpha, choice)


def aux_loss(stats: LoadStats, alpha: float) -> Tensor:
    """alpha * N * sum_i f_i * P_i, differentiable through P only."""
    if len(stats.f) != stats.P.shape[0]:
        raise DimensionError(f"f has {len(stats.f)} entries but P has {stats.P.shape[0]}")
    n_experts = len(stats.f)
    return (stats.P * stats.f).sum() * (alpha * n_experts)


def moe_forward(
    x: Tensor,
    gate_weights: Tensor,
    experts: list[FeedForward],
    cfg: RouterConfig,
    rng: RngStream | None = None,
    training: bool = False,
) -> tuple[Tensor, LoadStats, DispatchPlan]:
    """Switch-routed expert layer over ``T x d`` tokens.

    Returns the combined output, routing statistics over the full gate matrix,
    and the dispatch plan. Rows of dropped tokens are zero.
    """
    n_tokens, d_model = x.shape
    if len(experts) != cfg.num_experts or gate_weights.shape != (d_model, cfg.num_experts):
        raise DimensionError(
            f"{len(experts)} experts / gate {gate_weights.shape} do not match "
            f"d_model={d_model}, num_experts={cfg.num_experts}"
        )
    for i, expert in enumerate(experts):
        if expert.d_model != d_model or expert.outer.weight.shape[1] != d_model:
            raise DimensionError(f"expert {i} maps {expert.d_model} features, tokens have {d_model}")

    gate_rng = rng.spawn("jitter") if rng is not None else None
    probs = gate(apply_jitter(x, cfg.jitter_eps, gate_rng, training), gate_weights)
    capacity = expert_capacity(n_tokens, cfg.num_experts, cfg.capacity_factor)
    plan = plan_dispatch(probs, capacity)

    rows: list[np.ndarray] = []
    outputs: list[Tensor] = []
    with mac_tag("expert"):
        for e, expert in enumerate(experts):
            idx = plan.tokens_for(e)
            if len(idx) == 0:
                continue
            expert_rng = rng.spawn(f"expert{e}") if rng is not None else None
            h = expert(x[idx], expert_rng, training)
            weight = probs[idx, np.full(len(idx), e)].reshape(len(idx), 1)
            outputs.append(h * weight)
            rows.append(idx)

    if outputs:
        y = scatter_rows(concat(outputs, axis=0), np.concatenate(rows), n_tokens)
    else:
        y = Tensor(np.zeros((n_tokens, d_model)))
    return y, load_stats(probs, plan, cfg.alpha), plan


class MoELayer(Module):
    """Gate weights plus ``N`` expert feed-forward networks."""

    def __init__(
        self, d_model: int, d_ff: int, cfg: RouterConfig, dropout_p: float, rng: RngStream
    ) -> None:
        self.gate_weight = uniform_init(rng.spawn("gate"), d_model, (d_model, cfg.num_experts))
        self.experts = [
            FeedForward(d_model, d_ff, dropout_p, rng.spawn(f"expert{i}"))
            for i in range(cfg.num_experts)
        ]
        self.cfg = cfg

    def __call__(
        self, x: Tensor, rng: RngStream | None = None, training: bool = False
    ) -> tuple[Tensor, LoadStats]:
        y, stats, _ = moe_forward(x, self.gate_weight, self.experts, self.cfg, rng, training)
        return y, stats
