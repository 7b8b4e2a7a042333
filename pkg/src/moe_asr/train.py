"""Training loop, evaluation, routing diagnostics and ablation grids."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import moe_layer_flags
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Utterance, collate, language_balanced_weights
from .errors import DimensionError, ParameterError, TrainingDivergedError
from .losses import LossBreakdown, combine, cross_entropy, rnnt_loss
from .metrics import error_report
from .models import (
    Batch,
    ModelConfig,
    S2SModel,
    TTModel,
    build_model,
    check_batch,
    count_parameters,
    greedy_decode_s2s,
    greedy_decode_tt,
    shift_targets,
)
from .moe import LoadStats, aux_loss
from .optim import AdamW, OptimizerConfig
from .rng import RngStream
from .tensor import log_softmax, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 16
    max_steps: int = 1000
    eval_every: int = 0
    seed: int = 0
    output_dir: str | None = None
    label_smoothing: float = 0.1
    sampling_temperature: float = 0.5
    max_symbols_per_frame: int = 3

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ParameterError(f"max_steps must be >= 0, got {self.max_steps}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        data = dict(data)
        if isinstance(data.get("model"), dict):
            data["model"] = ModelConfig.from_dict(data["model"])
        if isinstance(data.get("optimizer"), dict):
            data["optimizer"] = OptimizerConfig(**data["optimizer"])
        return cls(**data)


# --------------------------------------------------------------------------
# objective


def compute_loss(
    model: S2SModel | TTModel,
    batch: Batch,
    label_smoothing: float = 0.0,
    rng: RngStream | None = None,
    training: bool = False,
) -> tuple[LossBreakdown, list[LoadStats]]:
    cfg = model.cfg
    check_batch(batch, cfg)
    if cfg.family == "s2s":
        logits, stats = model(batch, rng, training)
        _, dec_out = shift_targets(batch, cfg)
        task = cross_entropy(logits, dec_out, np.asarray(batch.target_lengths) + 1, label_smoothing)
    else:
        logits, frame_lengths, stats = model(batch, rng, training)
        task = rnnt_loss(log_softmax(logits, axis=-1), batch.targets, frame_lengths, batch.target_lengths, cfg.blank)
    aux = [aux_loss(s, s.alpha) for s in stats]
    breakdown = combine(task, aux, sum(s.dropped for s in stats), sum(s.T for s in stats))
    return breakdown, stats


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: S2SModel | TTModel
    metrics: list[dict]
    evaluations: list[dict]
    checkpoints: list[Path]


def _checkpoint_header(cfg: TrainConfig, step: int, rng: RngStream) -> dict:
    # The output directory is where a run lives, not what it is; leaving it out
    # keeps checkpoints of identically seeded runs byte-identical.
    train_config = cfg.to_dict()
    train_config.pop("output_dir")
    return {"train_config": train_config, "model_config": cfg.model.to_dict(), "step": step, "rng": rng.state()}


def save_model(path, model, cfg: TrainConfig, step: int, rng: RngStream) -> Path:
    path = Path(path)
    save_checkpoint(path, model.state_dict(), _checkpoint_header(cfg, step, rng))
    return path


def load_model(path) -> tuple[S2SModel | TTModel, dict]:
    tensors, header = load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = build_model(cfg, 0)
    model.load_state_dict(tensors)
    return model, header


def train(
    cfg: TrainConfig,
    corpus: list[Utterance],
    eval_corpus: list[Utterance] | None = None,
) -> TrainResult:
    """AdamW training with language-balanced batch sampling.

    Writes one metrics record per step to ``metrics.jsonl`` and checkpoints at
    step 0, every ``eval_every`` steps and at the end (when ``output_dir`` is set).
    """
    if not corpus:
        raise ParameterError("training corpus is empty")
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    base = RngStream(cfg.seed)
    sampler = base.spawn("sampler")
    model = build_model(cfg.model, cfg.seed)
    params = model.parameters()
    opt = AdamW(params, cfg.optimizer)
    weights = language_balanced_weights(np.array([u.language for u in corpus]), cfg.sampling_temperature)

    metrics: list[dict] = []
    evaluations: list[dict] = []
    checkpoints: list[Path] = []
    metrics_fh = open(out_dir / "metrics.jsonl", "w") if out_dir else None

    def checkpoint(step: int) -> None:
        if out_dir is not None:
            checkpoints.append(save_model(out_dir / "checkpoints" / f"step_{step}.ckpt", model, cfg, step, sampler))
        if eval_corpus and step > 0:
            report = evaluate(model, eval_corpus, max_symbols_per_frame=cfg.max_symbols_per_frame)
            report["step"] = step
            evaluations.append(report)
            log.info("step %d: eval token error %.4f", step, report["overall"])

    try:
        checkpoint(0)
        for step in range(1, cfg.max_steps + 1):
            idx = sampler.choice(len(corpus), cfg.batch_size, p=weights)
            batch = collate([corpus[i] for i in idx])
            breakdown, stats = compute_loss(
                model, batch, cfg.label_smoothing, base.spawn(f"step{step}"), training=True
            )
            total = breakdown.total.item()
            if not math.isfinite(total):
                raise TrainingDivergedError(step, json.dumps(breakdown.to_record()))
            model.zero_grad()
            breakdown.total.backward()
            lr = cfg.optimizer.lr_at(opt.t)
            grad_norm = opt.step()
            record = {
                "step": step,
                "lr": lr,
                "grad_norm": grad_norm,
                **breakdown.to_record(),
                "drop_rate": breakdown.dropped_tokens / breakdown.tokens if breakdown.tokens else 0.0,
                "routing": [s.to_record() for s in stats],
            }
            metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if cfg.eval_every and step % cfg.eval_every == 0 and step != cfg.max_steps:
                checkpoint(step)
        if cfg.max_steps > 0:
            checkpoint(cfg.max_steps)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_dir is not None and checkpoints:
        (out_dir / "model.ckpt").write_bytes(checkpoints[-1].read_bytes())
    return TrainResult(model, metrics, evaluations, checkpoints)


# --------------------------------------------------------------------------
# evaluation


def decode(model: S2SModel | TTModel, corpus: list[Utterance], batch_size: int = 64, max_symbols_per_frame: int = 3):
    hyps: list[list[int]] = []
    for start in range(0, len(corpus), batch_size):
        batch = collate(corpus[start : start + batch_size])
        if model.cfg.family == "s2s":
            max_len = int(np.max(batch.target_lengths)) * 2 + 2
            hyps.extend(greedy_decode_s2s(batch, model, max_len))
        else:
            hyps.extend(greedy_decode_tt(batch, model, max_symbols_per_frame))
    return hyps


def evaluate(
    model: S2SModel | TTModel | str | Path,
    corpus: list[Utterance],
    batch_size: int = 64,
    max_symbols_per_frame: int = 3,
) -> dict:
    """Greedy-decode every utterance and report token error rates and eval-time drop rate."""
    if not isinstance(model, (S2SModel, TTModel)):
        model, _ = load_model(model)
    if corpus and corpus[0].features.shape[1] != model.cfg.d_feat:
        raise DimensionError(
            f"corpus has {corpus[0].features.shape[1]} features per frame, model expects {model.cfg.d_feat}"
        )
    hyps = decode(model, corpus, batch_size, max_symbols_per_frame)
    report = error_report([u.targets for u in corpus], hyps, [u.language for u in corpus])
    dropped = tokens = 0
    with no_grad():
        for start in range(0, len(corpus), batch_size):
            _, stats = compute_loss(model, collate(corpus[start : start + batch_size]))
            dropped += sum(s.dropped for s in stats)
            tokens += sum(s.T for s in stats)
    report["drop_rate"] = dropped / tokens if tokens else 0.0
    return report


def token_accuracy(report: dict) -> float:
    return 1.0 - report["overall"]


def dispatch_entropy(model: S2SModel | TTModel, corpus: list[Utterance], batch_size: int = 64) -> dict:
    """Entropy (nats) of each language's argmax-expert histogram, per MoE layer.

    Returns ``{"layers": [[H_lang0, H_lang1, ...], ...], "mean": {lang: mean over layers}}``.
    """
    cfg = model.cfg
    n_enc = sum(moe_layer_flags(cfg.encoder_layers, cfg.moe_every))
    counts: list[dict[int, np.ndarray]] = []
    with no_grad():
        for start in range(0, len(corpus), batch_size):
            batch = collate(corpus[start : start + batch_size])
            if cfg.family == "s2s":
                _, stats = model(batch)
                _, enc_lengths, _ = model.encode(batch)
            else:
                _, enc_lengths, stats = model(batch)
            dec_lengths = np.asarray(batch.target_lengths) + 1
            for layer, s in enumerate(stats):
                lengths = enc_lengths if layer < n_enc else dec_lengths
                langs = np.repeat(batch.language_ids, lengths)
                if len(counts) <= layer:
                    counts.append({})
                n_exp = len(s.f)
                for lang in np.unique(langs):
                    hist = np.bincount(s.choice[langs == lang], minlength=n_exp)
                    counts[layer][int(lang)] = counts[layer].get(int(lang), np.zeros(n_exp)) + hist
    layers = []
    for per_lang in counts:
        row = {}
        for lang, hist in sorted(per_lang.items()):
            p = hist / hist.sum()
            nz = p[p > 0]
            row[lang] = float(-(nz * np.log(nz)).sum())
        layers.append(row)
    langs = sorted({lang for row in layers for lang in row})
    mean = {lang: float(np.mean([row[lang] for row in layers if lang in row])) for lang in langs}
    return {"layers": layers, "mean": mean}


# --------------------------------------------------------------------------
# ablation


def ablation(
    grid: list[tuple[str, ModelConfig]],
    base: TrainConfig,
    corpus: list[Utterance],
    eval_corpus: list[Utterance],
    csv_path: str | Path | None = None,
) -> list[dict]:
    """Train every grid entry with the same seed and budget, then tabulate error rates."""
    if len(grid) < 2:
        raise ParameterError("an ablation grid needs at least two configurations")
    languages = sorted({u.language for u in eval_corpus})
    rows = []
    for name, model_cfg in grid:
        out = str(Path(base.output_dir) / name) if base.output_dir else None
        result = train(dataclasses.replace(base, model=model_cfg, output_dir=out), corpus)
        report = evaluate(result.model, eval_corpus, max_symbols_per_frame=base.max_symbols_per_frame)
        moe_layers = sum(moe_layer_flags(model_cfg.encoder_layers, model_cfg.moe_every))
        if model_cfg.family == "s2s":
            moe_layers += sum(moe_layer_flags(model_cfg.decoder_layers, model_cfg.moe_every))
        row = {
            "model": name,
            "experts": model_cfg.router.num_experts if moe_layers else 0,
            "label_experts": (
                model_cfg.label_decoder.moe_projection.num_experts
                if model_cfg.family == "tt" and model_cfg.label_decoder.moe_projection
                else 0
            ),
            "params": count_parameters(result.model)["total"],
            "streaming": model_cfg.streaming is not None,
            "lang_id": bool(model_cfg.language_id),
        }
        for lang in languages:
            entry = report["per_language"].get(str(lang))
            row[f"rate_{lang}"] = entry["rate"] if entry else float("nan")
        row["overall"] = report["overall"]
        rows.append(row)
    if csv_path is not None:
        write_csv(csv_path, rows)
    return rows


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
