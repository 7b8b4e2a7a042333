"""End-to-end models: an encoder-decoder Transformer and a Transformer transducer."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    BlockConfig,
    ConvSubsample,
    DecoderBlock,
    EncoderBlock,
    build_streaming_mask,
    causal_mask,
    full_mask,
    moe_layer_flags,
    sinusoidal_positions,
)
from .errors import DimensionError, ParameterError
from .moe import LoadStats, MoELayer, RouterConfig
from .nn import Embedding, LayerNorm, Linear, LSTMLayer, Module
from .rng import RngStream
from .tensor import Tensor, dropout, no_grad, scatter_rows


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StreamingConfig:
    left: int
    right: int


@dataclass(frozen=True)
class LabelDecoderConfig:
    embed_dim: int = 32
    lstm_layers: int = 1
    hidden: int = 64
    moe_projection: RouterConfig | None = None
    moe_d_ff: int | None = None


@dataclass(frozen=True)
class ModelConfig:
    family: str = "s2s"
    d_feat: int = 16
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 1
    label_decoder: LabelDecoderConfig = field(default_factory=LabelDecoderConfig)
    d_ff: int = 128
    vocab_size: int = 16
    blank_id: int | None = None
    moe_every: int = 0
    router: RouterConfig = field(default_factory=RouterConfig)
    streaming: StreamingConfig | None = None
    language_id: int | None = None  # number of languages, None disables the one-hot input
    dropout_p: float = 0.1
    moe_dropout_p: float | None = None
    conv_channels: int = 8
    d_joint: int = 64
    rel_clip: int = 16

    def __post_init__(self) -> None:
        if self.family not in ("s2s", "tt"):
            raise ParameterError(f"family must be 's2s' or 'tt', got {self.family!r}")
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.family == "s2s" and self.decoder_layers < 1:
            raise ParameterError("s2s models need at least one decoder layer")
        if self.family == "tt" and not 0 <= self.blank < self.vocab_size + 1:
            raise ParameterError(f"blank_id {self.blank_id} outside [0, {self.vocab_size}]")
        if self.streaming is not None and self.family != "tt":
            raise ParameterError("streaming masks apply to transducer models only")

    @property
    def blank(self) -> int:
        return self.vocab_size if self.blank_id is None else self.blank_id

    @property
    def bos(self) -> int:
        return self.vocab_size + 1

    @property
    def eos(self) -> int:
        return self.vocab_size

    @property
    def input_dim(self) -> int:
        return self.d_feat + (self.language_id or 0)

    def block_config(self, moe: bool, position_kind: str = "absolute") -> BlockConfig:
        if self.streaming is not None:
            left, right = self.streaming.left, self.streaming.right
        else:
            left = right = self.rel_clip
        return BlockConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            dropout_p=self.dropout_p,
            router=self.router if moe else None,
            position_kind=position_kind,
            rel_left=left,
            rel_right=right,
            moe_dropout_p=self.moe_dropout_p,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        data = dict(data)
        if isinstance(data.get("router"), dict):
            data["router"] = RouterConfig(**data["router"])
        if isinstance(data.get("streaming"), dict):
            data["streaming"] = StreamingConfig(**data["streaming"])
        if isinstance(data.get("label_decoder"), dict):
            ld = dict(data["label_decoder"])
            if isinstance(ld.get("moe_projection"), dict):
                ld["moe_projection"] = RouterConfig(**ld["moe_projection"])
            data["label_decoder"] = LabelDecoderConfig(**ld)
        return cls(**data)


PRESETS: dict[str, ModelConfig] = {
    "s2s-paper": ModelConfig(
        family="s2s",
        d_feat=80,
        d_model=512,
        n_heads=8,
        encoder_layers=18,
        decoder_layers=6,
        d_ff=2048,
        vocab_size=10014,
        moe_every=2,
        router=RouterConfig(num_experts=24),
        dropout_p=0.1,
        conv_channels=512,
    ),
    "tt-paper": ModelConfig(
        family="tt",
        d_feat=80,
        d_model=512,
        n_heads=8,
        encoder_layers=18,
        label_decoder=LabelDecoderConfig(embed_dim=320, lstm_layers=2, hidden=1024, moe_d_ff=1024),
        d_ff=2048,
        vocab_size=10014,
        moe_every=2,
        router=RouterConfig(num_experts=24),
        streaming=StreamingConfig(left=18, right=4),
        language_id=5,
        dropout_p=0.1,
        conv_channels=512,
        d_joint=512,
    ),
    "s2s-desk": ModelConfig(family="s2s", d_model=64, n_heads=4, encoder_layers=2, decoder_layers=1),
    "tt-desk": ModelConfig(
        family="tt",
        d_model=64,
        n_heads=4,
        encoder_layers=2,
        label_decoder=LabelDecoderConfig(embed_dim=32, lstm_layers=1, hidden=64),
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    return dataclasses.replace(PRESETS[name], **overrides)


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    features: np.ndarray  # B x T x d_feat
    feature_lengths: np.ndarray
    targets: np.ndarray  # B x U, padded with 0
    target_lengths: np.ndarray
    language_ids: np.ndarray

    @property
    def size(self) -> int:
        return len(self.feature_lengths)


def inject_language_id(features: np.ndarray, language_ids, num_languages: int | None) -> np.ndarray:
    """Append a one-hot language vector to every frame of ``B x T x d`` features."""
    if not num_languages:
        return features
    ids = np.asarray(language_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= num_languages):
        raise ParameterError(f"language ids {ids.tolist()} outside [0, {num_languages})")
    one_hot = np.eye(num_languages)[ids]
    tiled = np.broadcast_to(one_hot[:, None, :], features.shape[:2] + (num_languages,))
    return np.concatenate([features, tiled], axis=-1)


def _lengths_valid(lengths: np.ndarray, extent: int) -> np.ndarray:
    return np.arange(extent)[None, :] < np.asarray(lengths)[:, None]


# --------------------------------------------------------------------------
# shared audio encoder


class AudioEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream, position_kind: str) -> None:
        self.subsample = ConvSubsample(cfg.input_dim, cfg.conv_channels, cfg.d_model, rng.spawn("subsample"))
        flags = moe_layer_flags(cfg.encoder_layers, cfg.moe_every)
        self.layers = [
            EncoderBlock(cfg.block_config(moe, position_kind), rng.spawn(f"layer{i}"))
            for i, moe in enumerate(flags)
        ]
        self.norm = LayerNorm(cfg.d_model)
        self.cfg = cfg
        self.position_kind = position_kind

    def __call__(
        self, batch: Batch, rng: RngStream | None, training: bool
    ) -> tuple[Tensor, np.ndarray, list[LoadStats]]:
        cfg = self.cfg
        feats = inject_language_id(batch.features, batch.language_ids, cfg.language_id)
        feats = feats * _lengths_valid(batch.feature_lengths, feats.shape[1])[..., None]
        x, lengths = self.subsample(Tensor(feats), batch.feature_lengths)
        t_out = x.shape[1]
        if self.position_kind == "absolute":
            x = x + sinusoidal_positions(t_out, cfg.d_model)
        if cfg.streaming is not None:
            base = build_streaming_mask(t_out, cfg.streaming.left, cfg.streaming.right)
        else:
            base = full_mask(t_out)
        mask = base.with_lengths(lengths, lengths)
        valid = _lengths_valid(lengths, t_out)
        x = dropout(x, cfg.dropout_p, rng.spawn("input_drop") if rng else None, training)
        stats = []
        for i, layer in enumerate(self.layers):
            x, s = layer(x, mask, valid, rng.spawn(f"layer{i}") if rng else None, training)
            if s is not None:
                stats.append(s)
        return self.norm(x), lengths, stats


# --------------------------------------------------------------------------
# sequence-to-sequence Transformer


class S2SModel(Module):
    """Conv subsampling, Transformer encoder, Transformer decoder with cross-attention.

    Token ids ``0..vocab_size-1`` are data; ``vocab_size`` is EOS and
    ``vocab_size + 1`` is BOS. Logits cover data tokens plus EOS.
    """

    def __init__(self, cfg: ModelConfig, rng: RngStream) -> None:
        if cfg.family != "s2s":
            raise ParameterError("S2SModel needs family='s2s'")
        self.encoder = AudioEncoder(cfg, rng.spawn("encoder"), "absolute")
        self.embed = Embedding(cfg.vocab_size + 2, cfg.d_model, rng.spawn("embed"))
        flags = moe_layer_flags(cfg.decoder_layers, cfg.moe_every)
        self.decoder = [
            DecoderBlock(cfg.block_config(moe), rng.spawn(f"decoder{i}")) for i, moe in enumerate(flags)
        ]
        self.decoder_norm = LayerNorm(cfg.d_model)
        self.output = Linear(cfg.d_model, cfg.vocab_size + 1, rng.spawn("output"))
        self.cfg = cfg

    def encode(self, batch: Batch, rng: RngStream | None = None, training: bool = False):
        return self.encoder(batch, rng.spawn("encoder") if rng else None, training)

    def decode(
        self,
        tokens: np.ndarray,
        token_lengths: np.ndarray,
        memory: Tensor,
        memory_lengths: np.ndarray,
        rng: RngStream | None = None,
        training: bool = False,
    ) -> tuple[Tensor, list[LoadStats]]:
        cfg = self.cfg
        length = tokens.shape[1]
        x = self.embed(tokens) * np.sqrt(cfg.d_model) + sinusoidal_positions(length, cfg.d_model)
        x = dropout(x, cfg.dropout_p, rng.spawn("embed_drop") if rng else None, training)
        self_mask = causal_mask(length).with_lengths(token_lengths, token_lengths)
        cross_mask = full_mask(length, memory.shape[1]).with_lengths(token_lengths, memory_lengths)
        valid = _lengths_valid(token_lengths, length)
        stats = []
        for i, layer in enumerate(self.decoder):
            x, s = layer(
                x, memory, self_mask, cross_mask, valid, rng.spawn(f"decoder{i}") if rng else None, training
            )
            if s is not None:
                stats.append(s)
        return self.output(self.decoder_norm(x)), stats

    def __call__(
        self, batch: Batch, rng: RngStream | None = None, training: bool = False
    ) -> tuple[Tensor, list[LoadStats]]:
        """Teacher-forced logits ``B x (U+1) x (vocab+1)``; row ``u`` predicts target ``u`` (EOS last)."""
        memory, mem_lengths, enc_stats = self.encode(batch, rng, training)
        dec_in, _ = shift_targets(batch, self.cfg)
        logits, dec_stats = self.decode(
            dec_in, np.asarray(batch.target_lengths) + 1, memory, mem_lengths, rng, training
        )
        return logits, enc_stats + dec_stats


def shift_targets(batch: Batch, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Decoder input ``[BOS, y...]`` and output ``[y..., EOS]``, both ``B x (U+1)``."""
    targets = np.asarray(batch.targets, dtype=np.int64)
    b, u = targets.shape
    lengths = np.asarray(batch.target_lengths)
    valid = _lengths_valid(lengths, u)
    clean = np.where(valid, targets, 0)
    dec_in = np.concatenate([np.full((b, 1), cfg.bos), clean], axis=1)
    dec_out = np.concatenate([clean, np.zeros((b, 1), dtype=np.int64)], axis=1)
    dec_out[np.arange(b), lengths] = cfg.eos
    return dec_in, dec_out


def s2s_forward(batch: Batch, model: S2SModel, rng=None, training: bool = False):
    return model(batch, rng, training)


def greedy_decode_s2s(
    features: np.ndarray | Batch,
    model: S2SModel,
    max_len: int,
    language_ids=None,
    feature_lengths=None,
) -> list[int] | list[list[int]]:
    """Autoregressive argmax decoding from BOS until EOS or ``max_len`` tokens.

    A single ``T x d_feat`` feature matrix yields one token list; a Batch
    yields one list per utterance.
    """
    single = not isinstance(features, Batch)
    batch = _as_batch(features, language_ids, feature_lengths)
    n = batch.size
    results: list[list[int]] = [[] for _ in range(n)]
    if max_len <= 0:
        return results[0] if single else results
    cfg = model.cfg
    with no_grad():
        memory, mem_lengths, _ = model.encode(batch)
        tokens = np.full((n, 1), cfg.bos, dtype=np.int64)
        finished = np.zeros(n, dtype=bool)
        for _ in range(max_len):
            lengths = np.full(n, tokens.shape[1])
            logits, _ = model.decode(tokens, lengths, memory, mem_lengths)
            nxt = np.argmax(logits.data[:, -1], axis=-1)
            for i in range(n):
                if not finished[i]:
                    if nxt[i] == cfg.eos:
                        finished[i] = True
                    else:
                        results[i].append(int(nxt[i]))
            if finished.all():
                break
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
    return results[0] if single else results


def _as_batch(features, language_ids, feature_lengths) -> Batch:
    if isinstance(features, Batch):
        return features
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    n = feats.shape[0]
    lengths = np.full(n, feats.shape[1]) if feature_lengths is None else np.asarray(feature_lengths)
    ids = np.zeros(n, dtype=np.int64) if language_ids is None else np.asarray(language_ids).reshape(n)
    return Batch(feats, lengths, np.zeros((n, 0), dtype=np.int64), np.zeros(n, dtype=np.int64), ids)


# --------------------------------------------------------------------------
# Transformer transducer


class LabelDecoder(Module):
    """Embedding, pre-LN LSTM layers with residuals where widths match, optional MoE projection."""

    def __init__(self, cfg: ModelConfig, rng: RngStream) -> None:
        ld = cfg.label_decoder
        self.embed = Embedding(cfg.vocab_size + 1, ld.embed_dim, rng.spawn("embed"))
        self.norms = []
        self.lstms = []
        width = ld.embed_dim
        for i in range(ld.lstm_layers):
            self.norms.append(LayerNorm(width))
            self.lstms.append(LSTMLayer(width, ld.hidden, rng.spawn(f"lstm{i}")))
            width = ld.hidden
        if ld.moe_projection is not None:
            p = cfg.dropout_p if cfg.moe_dropout_p is None else cfg.moe_dropout_p
            self.moe_norm = LayerNorm(ld.hidden)
            self.moe = MoELayer(ld.hidden, ld.moe_d_ff or ld.hidden, ld.moe_projection, p, rng.spawn("moe"))
        else:
            self.moe_norm = None
            self.moe = None
        self.norm = LayerNorm(ld.hidden)
        self.dropout_p = cfg.dropout_p

    def __call__(
        self, tokens: np.ndarray, lengths: np.ndarray, rng: RngStream | None, training: bool
    ) -> tuple[Tensor, list[LoadStats]]:
        """Hidden states ``B x L x hidden`` for blank-prefixed token sequences ``B x L``."""
        x = self.embed(tokens)
        for i, (norm, lstm) in enumerate(zip(self.norms, self.lstms)):
            h = lstm(norm(x))
            h = dropout(h, self.dropout_p, rng.spawn(f"lstm_drop{i}") if rng else None, training)
            x = x + h if h.shape == x.shape else h
        stats = []
        if self.moe is not None:
            b, length, width = x.shape
            rows = np.flatnonzero(_lengths_valid(lengths, length).reshape(-1))
            flat = self.moe_norm(x).reshape(b * length, width)
            y_tok, s = self.moe(flat[rows], rng.spawn("moe") if rng else None, training)
            y = scatter_rows(y_tok, rows, b * length).reshape(b, length, width)
            x = x + dropout(y, self.dropout_p, rng.spawn("moe_drop") if rng else None, training)
            stats.append(s)
        return self.norm(x), stats

    def initial_state(self, batch: int):
        return [lstm.initial_state(batch) for lstm in self.lstms]

    def step(self, token: np.ndarray, state) -> tuple[Tensor, list]:
        """Advance one label for inference; returns ``B x hidden`` output and the new state."""
        x = self.embed(np.asarray(token, dtype=np.int64))
        new_state = []
        for norm, lstm, st in zip(self.norms, self.lstms, state):
            h, c = lstm.step(norm(x), st)
            new_state.append((h, c))
            x = x + h if h.shape == x.shape else h
        if self.moe is not None:
            y, _ = self.moe(self.moe_norm(x))
            x = x + y
        return self.norm(x), new_state


class TTModel(Module):
    """Audio encoder with relative-position attention, LSTM label decoder, additive joint network."""

    def __init__(self, cfg: ModelConfig, rng: RngStream) -> None:
        if cfg.family != "tt":
            raise ParameterError("TTModel needs family='tt'")
        self.encoder = AudioEncoder(cfg, rng.spawn("encoder"), "relative")
        self.label_decoder = LabelDecoder(cfg, rng.spawn("label_decoder"))
        self.joint_audio = Linear(cfg.d_model, cfg.d_joint, rng.spawn("joint_audio"))
        self.joint_label = Linear(cfg.label_decoder.hidden, cfg.d_joint, rng.spawn("joint_label"))
        self.joint_out = Linear(cfg.d_joint, cfg.vocab_size + 1, rng.spawn("joint_out"))
        self.cfg = cfg

    def encode(self, batch: Batch, rng: RngStream | None = None, training: bool = False):
        return self.encoder(batch, rng.spawn("encoder") if rng else None, training)

    def joint(self, audio: Tensor, label: Tensor) -> Tensor:
        """Combine ``B x T x d_model`` audio and ``B x L x hidden`` label states into ``B x T x L x (V+1)``."""
        a = self.joint_audio(audio)
        lab = self.joint_label(label)
        b, t, j = a.shape
        summed = a.reshape(b, t, 1, j) + lab.reshape(b, 1, lab.shape[1], j)
        return self.joint_out(summed.relu())

    def __call__(
        self, batch: Batch, rng: RngStream | None = None, training: bool = False
    ) -> tuple[Tensor, np.ndarray, list[LoadStats]]:
        """Joint logits ``B x T' x (U+1) x (V+1)``, encoder lengths, and routing statistics."""
        cfg = self.cfg
        audio, lengths, enc_stats = self.encode(batch, rng, training)
        targets = np.asarray(batch.targets, dtype=np.int64)
        b, u = targets.shape
        valid = _lengths_valid(batch.target_lengths, u)
        tokens = np.concatenate([np.full((b, 1), cfg.blank), np.where(valid, targets, cfg.blank)], axis=1)
        label, dec_stats = self.label_decoder(
            tokens, np.asarray(batch.target_lengths) + 1, rng.spawn("label_decoder") if rng else None, training
        )
        return self.joint(audio, label), lengths, enc_stats + dec_stats


def tt_forward(batch: Batch, model: TTModel, rng=None, training: bool = False):
    return model(batch, rng, training)


def greedy_decode_tt(
    features: np.ndarray | Batch,
    model: TTModel,
    max_symbols_per_frame: int = 3,
    language_ids=None,
    feature_lengths=None,
) -> list[int] | list[list[int]]:
    """Frame-synchronous greedy search.

    At each encoder frame, emit argmax labels (advancing the label decoder)
    until blank wins or the per-frame cap is reached, then move to the next frame.
    """
    if max_symbols_per_frame < 1:
        raise ParameterError("max_symbols_per_frame must be >= 1")
    single = not isinstance(features, Batch)
    batch = _as_batch(features, language_ids, feature_lengths)
    cfg = model.cfg
    results = []
    with no_grad():
        audio, lengths, _ = model.encode(batch)
        audio_proj = model.joint_audio(audio).data
        for i in range(batch.size):
            state = model.label_decoder.initial_state(1)
            label, state = model.label_decoder.step(np.array([cfg.blank]), state)
            label_proj = model.joint_label(label).data
            hyp: list[int] = []
            for t in range(int(lengths[i])):
                for _ in range(max_symbols_per_frame):
                    hidden = np.maximum(audio_proj[i, t] + label_proj[0], 0.0)
                    logits = hidden @ model.joint_out.weight.data + model.joint_out.bias.data
                    symbol = int(np.argmax(logits))
                    if symbol == cfg.blank:
                        break
                    hyp.append(symbol)
                    label, state = model.label_decoder.step(np.array([symbol]), state)
                    label_proj = model.joint_label(label).data
            results.append(hyp)
    return results[0] if single else results


# --------------------------------------------------------------------------


def build_model(cfg: ModelConfig, seed: int) -> S2SModel | TTModel:
    rng = RngStream(seed).spawn("init")
    return S2SModel(cfg, rng) if cfg.family == "s2s" else TTModel(cfg, rng)


def count_parameters(model: Module) -> dict[str, int]:
    """Total parameter count split into expert, router (gate) and other parameters."""
    expert = router = 0
    total = 0
    for name, p in model.named_parameters():
        total += p.size
        if ".experts." in name:
            expert += p.size
        elif name.endswith("gate_weight"):
            router += p.size
    return {"total": total, "expert": expert, "router": router, "other": total - expert - router}


def expert_ffn_parameters(d_model: int, d_ff: int) -> int:
    return d_model * d_ff + d_ff + d_ff * d_model + d_model


def zero_parameters(model: Module) -> None:
    for p in model.parameters():
        p.data = np.zeros_like(p.data)


def check_batch(batch: Batch, cfg: ModelConfig) -> None:
    if batch.features.shape[-1] != cfg.d_feat:
        raise DimensionError(f"batch has {batch.features.shape[-1]} features, model expects {cfg.d_feat}")
    if cfg.family == "tt" and np.any(
        (np.asarray(batch.targets) == cfg.blank) & _lengths_valid(batch.target_lengths, batch.targets.shape[1])
    ):
        raise ParameterError("targets must not contain the blank id")

