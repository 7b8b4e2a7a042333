"""Synthetic multi-language transduction corpora.

Every language shares one pool of random feature templates but assigns them
to tokens through its own permutation, so the same frames spell different
tokens in different languages. An utterance repeats each target token's
template for a few frames and adds Gaussian noise.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .models import Batch
from .rng import RngStream


@dataclass(frozen=True)
class SyntheticTask:
    num_languages: int = 3
    vocab_size: int = 16
    feature_dim: int = 16
    noise_scale: float = 0.1
    repeat_range: tuple[int, int] = (2, 4)
    target_length_range: tuple[int, int] = (3, 8)
    seed: int = 0
    language_weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "repeat_range", tuple(self.repeat_range))
        object.__setattr__(self, "target_length_range", tuple(self.target_length_range))
        if self.language_weights is not None:
            object.__setattr__(self, "language_weights", tuple(self.language_weights))
            if len(self.language_weights) != self.num_languages:
                raise ParameterError("language_weights needs one entry per language")
        if self.num_languages < 1 or self.vocab_size < 2:
            raise ParameterError("need at least one language and two tokens")
        if self.num_languages > 1 and self.vocab_size < 3:
            raise ParameterError("distinct language maps need vocab_size >= 3")
        lo, hi = self.repeat_range
        if not 1 <= lo <= hi:
            raise ParameterError(f"bad repeat_range {self.repeat_range}")
        lo, hi = self.target_length_range
        if not 1 <= lo <= hi:
            raise ParameterError(f"bad target_length_range {self.target_length_range}")

    def templates(self) -> np.ndarray:
        return RngStream(self.seed).spawn("templates").normal((self.vocab_size, self.feature_dim))

    def language_maps(self) -> np.ndarray:
        """``L x V`` table: token ``k`` of language ``l`` emits template ``maps[l, k]``."""
        rng = RngStream(self.seed).spawn("language_maps")
        maps: list[np.ndarray] = []
        while len(maps) < self.num_languages:
            perm = rng.permutation(self.vocab_size)
            if not any(np.array_equal(perm, m) for m in maps):
                maps.append(perm)
        return np.stack(maps)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SyntheticTask:
        return cls(**data)


@dataclass
class Utterance:
    features: np.ndarray  # T x feature_dim
    targets: np.ndarray  # U token ids
    language: int


def generate_corpus(task: SyntheticTask, num_utterances: int, split: str = "train") -> list[Utterance]:
    """Deterministic corpus; different ``split`` names draw independent utterances."""
    rng = RngStream(task.seed).spawn(f"corpus/{split}")
    templates = task.templates()
    maps = task.language_maps()
    weights = np.ones(task.num_languages) if task.language_weights is None else np.asarray(task.language_weights)
    weights = weights / weights.sum()
    languages = rng.choice(task.num_languages, num_utterances, p=weights)
    lengths = rng.integers(*task.target_length_range, shape=num_utterances)
    corpus = []
    for i in range(num_utterances):
        lang = int(languages[i])
        tokens = rng.integers(0, task.vocab_size - 1, shape=int(lengths[i]))
        repeats = rng.integers(*task.repeat_range, shape=len(tokens))
        frames = np.repeat(templates[maps[lang][tokens]], repeats, axis=0)
        if task.noise_scale > 0:
            frames = frames + rng.normal(frames.shape, scale=task.noise_scale)
        corpus.append(Utterance(frames, tokens.astype(np.int64), lang))
    return corpus


def collate(utterances: list[Utterance]) -> Batch:
    n = len(utterances)
    t_max = max(len(u.features) for u in utterances)
    u_max = max(len(u.targets) for u in utterances)
    dim = utterances[0].features.shape[1]
    feats = np.zeros((n, t_max, dim))
    targets = np.zeros((n, u_max), dtype=np.int64)
    for i, utt in enumerate(utterances):
        feats[i, : len(utt.features)] = utt.features
        targets[i, : len(utt.targets)] = utt.targets
    return Batch(
        feats,
        np.array([len(u.features) for u in utterances]),
        targets,
        np.array([len(u.targets) for u in utterances]),
        np.array([u.language for u in utterances], dtype=np.int64),
    )


def language_balanced_weights(languages: np.ndarray, temperature: float) -> np.ndarray:
    """Per-utterance sampling probabilities giving language ``l`` mass proportional to ``n_l ** temperature``.

    ``temperature=1`` reproduces uniform utterance sampling; smaller values
    up-weight low-resource languages.
    """
    languages = np.asarray(languages)
    counts = np.bincount(languages)
    present = counts > 0
    mass = np.zeros(len(counts))
    mass[present] = counts[present].astype(float) ** temperature
    mass /= mass.sum()
    per_utt = mass[languages] / counts[languages]
    return per_utt / per_utt.sum()


def save_corpus(path, corpus: list[Utterance], task: SyntheticTask | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        features=np.concatenate([u.features for u in corpus]),
        frame_lengths=np.array([len(u.features) for u in corpus]),
        targets=np.concatenate([u.targets for u in corpus]),
        target_lengths=np.array([len(u.targets) for u in corpus]),
        languages=np.array([u.language for u in corpus]),
        task=np.array(json.dumps(task.to_dict() if task else None)),
    )


def load_corpus(path) -> tuple[list[Utterance], SyntheticTask | None]:
    with np.load(path) as z:
        feats = np.split(z["features"], np.cumsum(z["frame_lengths"])[:-1])
        targets = np.split(z["targets"], np.cumsum(z["target_lengths"])[:-1])
        corpus = [
            Utterance(f, t.astype(np.int64), int(lang)) for f, t, lang in zip(feats, targets, z["languages"])
        ]
        task = json.loads(str(z["task"]))
    return corpus, (SyntheticTask.from_dict(task) if task else None)
