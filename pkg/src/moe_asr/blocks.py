"""Attention, masks, pre-LN residual blocks and the convolutional subsampler."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .moe import LoadStats, MoELayer, RouterConfig
from .nn import FeedForward, LayerNorm, Linear, Module, uniform_init
from .rng import RngStream
from .tensor import Tensor, conv2d, conv_output_extent, dropout, masked_softmax, matmul, scatter_rows


# --------------------------------------------------------------------------
# masks


@dataclass(frozen=True)
class AttentionMask:
    """``allowed[..., t, s]`` is true when query ``t`` may attend key ``s``."""

    allowed: np.ndarray

    def __or__(self, other: AttentionMask) -> AttentionMask:
        return AttentionMask(self.allowed | other.allowed)

    def __and__(self, other: AttentionMask) -> AttentionMask:
        return AttentionMask(self.allowed & other.allowed)

    def with_lengths(self, q_lengths, k_lengths) -> AttentionMask:
        """Broadcast to a batch, disallowing padded queries and keys."""
        q_lengths = np.asarray(q_lengths)
        k_lengths = np.asarray(k_lengths)
        t_q, t_k = self.allowed.shape[-2:]
        q_ok = np.arange(t_q)[None, :] < q_lengths[:, None]
        k_ok = np.arange(t_k)[None, :] < k_lengths[:, None]
        return AttentionMask(self.allowed & q_ok[:, :, None] & k_ok[:, None, :])


def full_mask(t_q: int, t_k: int | None = None) -> AttentionMask:
    return AttentionMask(np.ones((t_q, t_q if t_k is None else t_k), dtype=bool))


def causal_mask(length: int) -> AttentionMask:
    return AttentionMask(np.tril(np.ones((length, length), dtype=bool)))


def build_streaming_mask(length: int, left: int, right: int) -> AttentionMask:
    """Frame ``t`` sees frames ``t - left`` through ``t + right``."""
    if length < 1:
        raise ParameterError(f"mask length must be >= 1, got {length}")
    offset = np.arange(length)[None, :] - np.arange(length)[:, None]
    return AttentionMask((offset >= -left) & (offset <= right))


# --------------------------------------------------------------------------
# attention


def relative_index(t_q: int, t_k: int, left: int, right: int) -> np.ndarray:
    """Bias-table column for each (query, key) pair: offset ``s - t`` clipped to [-left, right]."""
    offset = np.arange(t_k)[None, :] - np.arange(t_q)[:, None]
    return np.clip(offset, -left, right) + left


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``n_heads`` heads.

    With ``position_kind="relative"`` a learned per-head bias indexed by the
    clipped key-minus-query offset is added to every score.
    """

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        rng: RngStream,
        position_kind: str = "absolute",
        rel_left: int = 16,
        rel_right: int = 16,
    ) -> None:
        if d_model % n_heads:
            raise ParameterError(f"d_model {d_model} is not divisible by n_heads {n_heads}")
        if position_kind not in ("absolute", "relative"):
            raise ParameterError(f"unknown position_kind {position_kind!r}")
        self.query = Linear(d_model, d_model, rng.spawn("query"))
        self.key = Linear(d_model, d_model, rng.spawn("key"))
        self.value = Linear(d_model, d_model, rng.spawn("value"))
        self.output = Linear(d_model, d_model, rng.spawn("output"))
        self.rel_bias = (
            Tensor(np.zeros((n_heads, rel_left + rel_right + 1)), requires_grad=True)
            if position_kind == "relative"
            else None
        )
        self.n_heads = n_heads
        self.position_kind = position_kind
        self.rel_left = rel_left
        self.rel_right = rel_right

    def _split(self, x: Tensor) -> Tensor:
        batch, length, d_model = x.shape
        return x.reshape(batch, length, self.n_heads, d_model // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(
        self,
        queries: Tensor,
        keys: Tensor,
        mask: AttentionMask | np.ndarray,
        return_weights: bool = False,
        values: Tensor | None = None,
    ):
        """Attend ``B x Tq x d`` queries over ``B x Tk x d`` keys (values default to keys).

        Query rows with no allowed key produce zero context.
        """
        allowed = mask.allowed if isinstance(mask, AttentionMask) else np.asarray(mask)
        batch, t_q, d_model = queries.shape
        t_k = keys.shape[1]
        if allowed.shape[-2:] != (t_q, t_k):
            raise DimensionError(f"mask {allowed.shape} does not match {t_q} queries x {t_k} keys")
        q = self._split(self.query(queries))
        k = self._split(self.key(keys))
        v = self._split(self.value(keys if values is None else values))
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_model // self.n_heads))
        if self.rel_bias is not None:
            idx = relative_index(t_q, t_k, self.rel_left, self.rel_right)
            scores = scores + self.rel_bias[:, idx]
        if allowed.ndim == 3:
            allowed = allowed[:, None]
        weights = masked_softmax(scores, allowed, axis=-1)
        context = matmul(weights, v).transpose(0, 2, 1, 3).reshape(batch, t_q, d_model)
        out = self.output(context)
        return (out, weights) if return_weights else out


def mha(
    q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask, params: MultiHeadAttention
) -> Tensor:
    return params(q, k, mask, values=v)


# --------------------------------------------------------------------------
# blocks


@dataclass(frozen=True)
class BlockConfig:
    d_model: int
    n_heads: int
    d_ff: int
    dropout_p: float = 0.1
    router: RouterConfig | None = None  # None: dense FFN
    position_kind: str = "absolute"
    rel_left: int = 16
    rel_right: int = 16
    moe_dropout_p: float | None = None

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")

    @property
    def ffn_kind(self) -> str:
        return "dense" if self.router is None else "moe"


class PositionwiseFFN(Module):
    """Dense FFN or MoE layer applied to the valid (unpadded) positions."""

    def __init__(self, cfg: BlockConfig, rng: RngStream) -> None:
        if cfg.router is None:
            self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout_p, rng.spawn("ffn"))
            self.moe = None
        else:
            p = cfg.dropout_p if cfg.moe_dropout_p is None else cfg.moe_dropout_p
            self.ffn = None
            self.moe = MoELayer(cfg.d_model, cfg.d_ff, cfg.router, p, rng.spawn("moe"))

    def __call__(
        self, x: Tensor, valid: np.ndarray | None, rng: RngStream | None, training: bool
    ) -> tuple[Tensor, LoadStats | None]:
        if self.moe is None:
            return self.ffn(x, rng.spawn("ffn") if rng else None, training), None
        lead = x.shape[:-1]
        d_model = x.shape[-1]
        flat = x.reshape(-1, d_model)
        rows = np.flatnonzero(valid.reshape(-1)) if valid is not None else np.arange(flat.shape[0])
        y_tok, stats = self.moe(flat[rows], rng.spawn("moe") if rng else None, training)
        y = scatter_rows(y_tok, rows, flat.shape[0]).reshape(*lead, d_model)
        return y, stats


def _drop(x: Tensor, p: float, rng: RngStream | None, name: str, training: bool) -> Tensor:
    return dropout(x, p, rng.spawn(name) if rng else None, training)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    return (x.reshape(1, *x.shape), True) if x.ndim == 2 else (x, False)


class EncoderBlock(Module):
    """Pre-LN block: x + drop(MHA(LN(x))), then + drop(FFN(LN(.)))."""

    def __init__(self, cfg: BlockConfig, rng: RngStream) -> None:
        self.attn_norm = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(
            cfg.d_model, cfg.n_heads, rng.spawn("attn"), cfg.position_kind, cfg.rel_left, cfg.rel_right
        )
        self.ffn_norm = LayerNorm(cfg.d_model)
        self.ffn = PositionwiseFFN(cfg, rng.spawn("ffn"))
        self.cfg = cfg

    def __call__(
        self,
        x: Tensor,
        mask: AttentionMask,
        valid: np.ndarray | None = None,
        rng: RngStream | None = None,
        training: bool = False,
    ) -> tuple[Tensor, LoadStats | None]:
        x, squeeze = _as_batch(x)
        if valid is not None and valid.ndim == 1:
            valid = valid[None]
        p = self.cfg.dropout_p
        h = self.attn_norm(x)
        y = x + _drop(self.attn(h, h, mask), p, rng, "attn_drop", training)
        f, stats = self.ffn(self.ffn_norm(y), valid, rng, training)
        y = y + _drop(f, p, rng, "ffn_drop", training)
        return (y.reshape(*y.shape[1:]) if squeeze else y), stats


class DecoderBlock(Module):
    """Pre-LN block with self-attention, cross-attention and FFN sub-layers."""

    def __init__(self, cfg: BlockConfig, rng: RngStream) -> None:
        self.self_norm = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng.spawn("self_attn"))
        self.cross_norm = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng.spawn("cross_attn"))
        self.ffn_norm = LayerNorm(cfg.d_model)
        self.ffn = PositionwiseFFN(cfg, rng.spawn("ffn"))
        self.cfg = cfg

    def __call__(
        self,
        x: Tensor,
        encoder_out: Tensor,
        self_mask: AttentionMask,
        cross_mask: AttentionMask,
        valid: np.ndarray | None = None,
        rng: RngStream | None = None,
        training: bool = False,
    ) -> tuple[Tensor, LoadStats | None]:
        x, squeeze = _as_batch(x)
        encoder_out, _ = _as_batch(encoder_out)
        if valid is not None and valid.ndim == 1:
            valid = valid[None]
        p = self.cfg.dropout_p
        h = self.self_norm(x)
        y = x + _drop(self.self_attn(h, h, self_mask), p, rng, "self_drop", training)
        y = y + _drop(
            self.cross_attn(self.cross_norm(y), encoder_out, cross_mask), p, rng, "cross_drop", training
        )
        f, stats = self.ffn(self.ffn_norm(y), valid, rng, training)
        y = y + _drop(f, p, rng, "ffn_drop", training)
        return (y.reshape(*y.shape[1:]) if squeeze else y), stats


def encoder_block(x, block: EncoderBlock, mask, rng=None, training=False):
    return block(x, mask, None, rng, training)


def decoder_block(x, encoder_out, block: DecoderBlock, self_mask, cross_mask, rng=None, training=False):
    return block(x, encoder_out, self_mask, cross_mask, None, rng, training)


def moe_layer_flags(num_layers: int, moe_every: int) -> list[bool]:
    """Which blocks carry an MoE FFN: every ``moe_every``-th block, starting with block ``moe_every``."""
    if moe_every <= 0:
        return [False] * num_layers
    return [(i + 1) % moe_every == 0 for i in range(num_layers)]


# --------------------------------------------------------------------------
# subsampling front end


def subsampled_length(length: int, num_convs: int = 2) -> int:
    for _ in range(num_convs):
        length = conv_output_extent(length)
    return length


class ConvSubsample(Module):
    """Two stride-2, 3x3 ReLU convolutions over the (time, feature) plane, then a linear map."""

    def __init__(self, d_feat: int, channels: int, d_out: int, rng: RngStream) -> None:
        self.conv1_weight = uniform_init(rng.spawn("conv1_weight"), 9, (channels, 1, 3, 3))
        self.conv1_bias = uniform_init(rng.spawn("conv1_bias"), 9, (channels,))
        self.conv2_weight = uniform_init(rng.spawn("conv2_weight"), 9 * channels, (channels, channels, 3, 3))
        self.conv2_bias = uniform_init(rng.spawn("conv2_bias"), 9 * channels, (channels,))
        self.freq_out = subsampled_length(d_feat)
        self.proj = Linear(channels * self.freq_out, d_out, rng.spawn("proj"))
        self.d_feat = d_feat

    def __call__(self, features: Tensor, lengths=None) -> tuple[Tensor, np.ndarray]:
        """Map ``B x T x d_feat`` to ``B x T' x d_out`` with ``T' = ceil(T / 4)`` for even ``T``."""
        squeeze = features.ndim == 2
        if squeeze:
            features = features.reshape(1, *features.shape)
        batch, length, d_feat = features.shape
        if d_feat != self.d_feat:
            raise DimensionError(f"expected {self.d_feat} features per frame, got {d_feat}")
        if length < 1 or subsampled_length(length) < 1:
            raise DimensionError(f"input of {length} frames is too short to subsample")
        if lengths is None:
            lengths = np.full(batch, length)
        x = features.reshape(batch, 1, length, d_feat)
        x = conv2d(x, self.conv1_weight, self.conv1_bias).relu()
        # Zero frames past each sequence's end so padding looks like the conv's own zero border.
        mid_lengths = np.array([conv_output_extent(int(n)) for n in lengths])
        x = x * (np.arange(x.shape[2])[None, :] < mid_lengths[:, None])[:, None, :, None]
        x = conv2d(x, self.conv2_weight, self.conv2_bias).relu()
        _, channels, t_out, f_out = x.shape
        x = x.transpose(0, 2, 1, 3).reshape(batch, t_out, channels * f_out)
        out = self.proj(x)
        out_lengths = np.array([subsampled_length(int(n)) for n in lengths])
        if squeeze:
            out = out.reshape(t_out, out.shape[-1])
        return out, out_lengths


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d_model // 2])
    return table
