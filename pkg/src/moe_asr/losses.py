"""Training objectives: label-smoothed cross-entropy, the transducer loss, and their combination."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, log_softmax, sum_all


def cross_entropy(
    logits: Tensor, targets: np.ndarray, target_lengths=None, label_smoothing: float = 0.0
) -> Tensor:
    """Mean over unpadded positions of the cross-entropy against smoothed one-hot targets.

    ``logits`` is ``B x U x V``; positions ``u >= target_lengths[b]`` are ignored.
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ParameterError(f"label_smoothing must lie in [0, 1), got {label_smoothing}")
    targets = np.asarray(targets, dtype=np.int64)
    b, u, vocab = logits.shape
    if targets.shape != (b, u):
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    lengths = np.full(b, u) if target_lengths is None else np.asarray(target_lengths)
    valid = np.arange(u)[None, :] < lengths[:, None]
    if np.any((targets[valid] < 0) | (targets[valid] >= vocab)):
        raise ParameterError(f"target ids must lie in [0, {vocab})")
    q = np.full((b, u, vocab), label_smoothing / vocab)
    bi, ui = np.nonzero(valid)
    q[bi, ui, targets[bi, ui]] += 1.0 - label_smoothing
    q *= valid[..., None]
    return -(log_softmax(logits, axis=-1) * q).sum() * (1.0 / max(int(valid.sum()), 1))


# --------------------------------------------------------------------------
# transducer loss


def _transducer_lattice(lp: np.ndarray, targets: np.ndarray, blank_id: int):
    """Blank and label log-probabilities on the ``B x T x (U+1)`` lattice."""
    b, t_max, u1, _ = lp.shape
    blank = lp[..., blank_id]
    emit = np.full((b, t_max, u1), -np.inf)
    if u1 > 1:
        idx = np.broadcast_to(targets[:, None, :, None], (b, t_max, u1 - 1, 1))
        emit[:, :, :-1] = np.take_along_axis(lp[:, :, :-1, :], idx, axis=-1)[..., 0]
    return blank, emit


def _forward_variables(blank, emit, t_lens, u_lens):
    b, t_max, u1 = blank.shape
    alpha = np.full((b, t_max, u1), -np.inf)
    alpha[:, 0, 0] = 0.0
    for t in range(t_max):
        for u in range(u1):
            if t == 0 and u == 0:
                continue
            from_blank = alpha[:, t - 1, u] + blank[:, t - 1, u] if t > 0 else -np.inf
            from_label = alpha[:, t, u - 1] + emit[:, t, u - 1] if u > 0 else -np.inf
            alpha[:, t, u] = np.logaddexp(from_blank, from_label)
    rows = np.arange(b)
    log_like = alpha[rows, t_lens - 1, u_lens] + blank[rows, t_lens - 1, u_lens]
    return alpha, log_like


def _backward_variables(blank, emit, t_lens, u_lens):
    b, t_max, u1 = blank.shape
    # One extra row/column of -inf keeps the recursion free of boundary cases.
    beta = np.full((b, t_max + 1, u1 + 1), -np.inf)
    inside = (np.arange(t_max)[None, :, None] < t_lens[:, None, None]) & (
        np.arange(u1)[None, None, :] <= u_lens[:, None, None]
    )
    rows = np.arange(b)
    terminal = np.zeros((b, t_max, u1), dtype=bool)
    terminal[rows, t_lens - 1, u_lens] = True
    for t in range(t_max - 1, -1, -1):
        for u in range(u1 - 1, -1, -1):
            value = np.logaddexp(beta[:, t + 1, u] + blank[:, t, u], beta[:, t, u + 1] + emit[:, t, u])
            value = np.where(terminal[:, t, u], blank[:, t, u], value)
            beta[:, t, u] = np.where(inside[:, t, u], value, -np.inf)
    return beta


def _transducer_nll(lp: np.ndarray, targets: np.ndarray, t_lens, u_lens, blank_id: int):
    """Per-utterance negative log-likelihood and its gradient w.r.t. ``lp``."""
    b, t_max, u1, _ = lp.shape
    t_lens = np.asarray(t_lens, dtype=np.int64)
    u_lens = np.asarray(u_lens, dtype=np.int64)
    if np.any(t_lens < 1):
        raise ParameterError("transducer loss needs at least one frame per utterance")
    if np.any(t_lens > t_max) or np.any(u_lens > u1 - 1):
        raise DimensionError(f"lengths exceed lattice {lp.shape}")
    blank, emit = _transducer_lattice(lp, targets, blank_id)
    alpha, log_like = _forward_variables(blank, emit, t_lens, u_lens)
    beta = _backward_variables(blank, emit, t_lens, u_lens)

    rows = np.arange(b)
    after_blank = beta[:, 1:, :u1].copy()
    after_blank[rows, t_lens - 1, u_lens] = 0.0
    after_label = beta[:, :t_max, 1 : u1 + 1]
    norm = log_like[:, None, None]
    with np.errstate(invalid="ignore"):
        g_blank = -np.exp(alpha + blank + after_blank - norm)
        g_emit = -np.exp(alpha + emit + after_label - norm)
    g_blank = np.nan_to_num(g_blank, nan=0.0)
    g_emit = np.nan_to_num(g_emit, nan=0.0)

    grad = np.zeros_like(lp)
    grad[..., blank_id] += g_blank
    if u1 > 1:
        bi, ti, ui = np.meshgrid(rows, np.arange(t_max), np.arange(u1 - 1), indexing="ij")
        np.add.at(grad, (bi, ti, ui, targets[bi, ui]), g_emit[:, :, :-1])
    return -log_like, grad


def rnnt_loss(
    log_probs: Tensor, targets: np.ndarray, frame_lengths, target_lengths, blank_id: int
) -> Tensor:
    """Mean transducer loss over a batch of ``B x T x (U+1) x (V+1)`` joint log-probabilities."""
    targets = np.asarray(targets, dtype=np.int64).reshape(log_probs.shape[0], -1)
    nll, grad = _transducer_nll(log_probs.data, targets, frame_lengths, target_lengths, blank_id)
    b = len(nll)
    return Tensor._make(np.asarray(nll.mean()), (log_probs,), lambda g: (grad * (g / b),))


def rnnt_loss_forward(joint_log_probs: Tensor, target, blank_id: int) -> Tensor:
    """Transducer loss for one utterance: ``-log`` of the summed probability of all alignments.

    ``joint_log_probs`` is ``T x (U+1) x (V+1)``, normalised over the last axis.
    """
    if not isinstance(joint_log_probs, Tensor):
        joint_log_probs = Tensor(joint_log_probs)
    t_max, u1, _ = joint_log_probs.shape
    if t_max == 0:
        raise ParameterError("transducer loss needs at least one frame")
    target = np.asarray(target, dtype=np.int64).reshape(1, -1)
    if target.shape[1] != u1 - 1:
        raise DimensionError(f"target of length {target.shape[1]} needs a lattice with U+1 = {target.shape[1] + 1}")
    lp = joint_log_probs.reshape(1, t_max, u1, joint_log_probs.shape[-1])
    return rnnt_loss(lp, target, [t_max], [u1 - 1], blank_id)


BRUTEFORCE_LIMIT = 12


def alignments(num_frames: int, num_labels: int):
    """Every monotonic lattice path as a move string; ``True`` is a label move.

    Each path has ``num_frames - 1`` blank moves and ``num_labels`` label moves,
    followed by the mandatory final blank from the last frame.
    """
    moves = num_frames - 1 + num_labels
    for label_slots in itertools.combinations(range(moves), num_labels):
        chosen = set(label_slots)
        yield [i in chosen for i in range(moves)]


def rnnt_loss_bruteforce(joint_log_probs, target, blank_id: int) -> float:
    """Transducer loss by explicit enumeration of alignments (test oracle)."""
    lp = np.asarray(joint_log_probs.data if isinstance(joint_log_probs, Tensor) else joint_log_probs)
    t_max, u1, _ = lp.shape
    target = [int(y) for y in np.asarray(target).reshape(-1)]
    if t_max + len(target) > BRUTEFORCE_LIMIT:
        raise ParameterError(f"T + U = {t_max + len(target)} exceeds enumeration limit {BRUTEFORCE_LIMIT}")
    path_probs = []
    for path in alignments(t_max, len(target)):
        t = u = 0
        logp = 0.0
        for is_label in path:
            if is_label:
                logp += lp[t, u, target[u]]
                u += 1
            else:
                logp += lp[t, u, blank_id]
                t += 1
        logp += lp[t_max - 1, len(target), blank_id]
        path_probs.append(math.exp(logp))
    return -math.log(math.fsum(path_probs))


# --------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    task_loss: Tensor
    aux_losses: list[Tensor]
    total: Tensor
    dropped_tokens: int = 0
    tokens: int = 0
    extras: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "task_loss": self.task_loss.item(),
            "aux_losses": [a.item() for a in self.aux_losses],
            "total": self.total.item(),
            "dropped_tokens": self.dropped_tokens,
            "tokens": self.tokens,
        }


def combine(task: Tensor, aux: list[Tensor], dropped_tokens: int = 0, tokens: int = 0) -> LossBreakdown:
    """total = task + sum(aux)."""
    total = task + sum_all(aux) if aux else task
    return LossBreakdown(task, list(aux), total, dropped_tokens, tokens)
