import math

import numpy as np
import pytest

from moe_asr.errors import DimensionError, ParameterError
from moe_asr.gradcheck import check_gradients
from moe_asr.losses import (
    BRUTEFORCE_LIMIT,
    alignments,
    combine,
    cross_entropy,
    rnnt_loss,
    rnnt_loss_bruteforce,
    rnnt_loss_forward,
)
from moe_asr.moe import aux_loss, load_stats
from moe_asr.optim import AdamW, OptimizerConfig
from moe_asr.tensor import Tensor, log_softmax, softmax


def random_lattice(rng, t, u, v):
    return log_softmax(Tensor(rng.normal(size=(t, u + 1, v + 1)) * 2), axis=-1)


class TestCrossEntropy:
    def test_uniform(self):
        loss = cross_entropy(Tensor(np.zeros((1, 3, 4))), np.array([[0, 1, 2]]))
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_correct(self):
        logits = np.full((1, 2, 4), -50.0)
        logits[0, 0, 1] = logits[0, 1, 3] = 50.0
        assert cross_entropy(Tensor(logits), np.array([[1, 3]])).item() < 1e-40

    def test_padding_ignored(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(1, 4, 5))
        full = cross_entropy(Tensor(logits[:, :2]), np.array([[1, 2]])).item()
        padded = cross_entropy(Tensor(logits), np.array([[1, 2, 9, 9]]), np.array([2])).item()
        assert padded == pytest.approx(full, abs=1e-14)

    def test_label_smoothing_uniform_is_unchanged(self):
        loss = cross_entropy(Tensor(np.zeros((1, 2, 4))), np.array([[0, 1]]), label_smoothing=0.3)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_gradient(self):
        logits = Tensor(np.random.default_rng(1).normal(size=(2, 3, 5)), requires_grad=True)
        targets = np.array([[0, 4, 2], [1, 1, 0]])
        assert check_gradients(lambda: cross_entropy(logits, targets, [3, 2], 0.1), [logits]) < 1e-6

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            cross_entropy(Tensor(np.zeros((1, 1, 3))), np.array([[3]]))

    def test_bad_smoothing(self):
        with pytest.raises(ParameterError):
            cross_entropy(Tensor(np.zeros((1, 1, 3))), np.array([[0]]), label_smoothing=1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cross_entropy(Tensor(np.zeros((1, 2, 3))), np.array([[0]]))


class TestTransducerLoss:
    def test_two_alignment_example(self):
        lp = Tensor(np.full((2, 2, 2), math.log(0.5)))
        assert rnnt_loss_forward(lp, [1], blank_id=0).item() == pytest.approx(math.log(4), abs=1e-12)
        assert rnnt_loss_bruteforce(lp, [1], blank_id=0) == pytest.approx(1.386294, abs=1e-6)

    def test_certain_blank_path(self):
        lp = np.full((5, 1, 3), -np.inf)
        lp[..., 2] = 0.0
        assert rnnt_loss_forward(Tensor(lp), [], blank_id=2).item() == 0.0

    def test_alignment_counts(self):
        assert len(list(alignments(2, 1))) == 2
        assert len(list(alignments(3, 0))) == 1
        assert len(list(alignments(4, 3))) == math.comb(6, 3)

    @pytest.mark.parametrize("t", range(1, 5))
    @pytest.mark.parametrize("u", range(0, 4))
    @pytest.mark.parametrize("v", [2, 3])
    def test_matches_enumeration(self, t, u, v):
        rng = np.random.default_rng(100 * t + 10 * u + v)
        for _ in range(5):
            lp = random_lattice(rng, t, u, v)
            target = rng.integers(0, v, size=u)
            blank = v
            fast = rnnt_loss_forward(lp, target, blank).item()
            assert abs(fast - rnnt_loss_bruteforce(lp, target, blank)) < 1e-10
            assert fast >= 0

    def test_blank_not_last(self):
        rng = np.random.default_rng(5)
        lp = random_lattice(rng, 3, 2, 3)
        target = np.array([2, 3])
        assert abs(rnnt_loss_forward(lp, target, 0).item() - rnnt_loss_bruteforce(lp, target, 0)) < 1e-10

    def test_gradient(self):
        rng = np.random.default_rng(6)
        raw = Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
        target = np.array([0, 2])
        err = check_gradients(lambda: rnnt_loss_forward(log_softmax(raw, axis=-1), target, 3), [raw])
        assert err < 1e-4

    def test_gradient_wrt_log_probs(self):
        lp = Tensor(random_lattice(np.random.default_rng(7), 3, 2, 3).data, requires_grad=True)
        assert check_gradients(lambda: rnnt_loss_forward(lp, [1, 0], 3), [lp]) < 1e-4

    def test_batch_is_mean_of_utterances(self):
        rng = np.random.default_rng(8)
        lps = [random_lattice(rng, 4, 3, 3).data for _ in range(3)]
        targets = rng.integers(0, 3, size=(3, 3))
        t_lens, u_lens = np.array([4, 2, 3]), np.array([3, 1, 0])
        singles = [
            rnnt_loss_forward(Tensor(lps[i][: t_lens[i], : u_lens[i] + 1]), targets[i, : u_lens[i]], 3).item()
            for i in range(3)
        ]
        batched = rnnt_loss(Tensor(np.stack(lps)), targets, t_lens, u_lens, 3).item()
        assert batched == pytest.approx(np.mean(singles), abs=1e-12)

    def test_no_frames(self):
        with pytest.raises(ParameterError):
            rnnt_loss_forward(Tensor(np.zeros((0, 1, 2))), [], 0)

    def test_target_lattice_mismatch(self):
        with pytest.raises(DimensionError):
            rnnt_loss_forward(Tensor(np.zeros((2, 2, 3))), [0, 1], 2)

    def test_enumeration_bound(self):
        with pytest.raises(ParameterError):
            rnnt_loss_bruteforce(np.zeros((BRUTEFORCE_LIMIT, 2, 3)), [0], 2)


class TestCombine:
    def test_dense(self):
        task = Tensor(1.5)
        out = combine(task, [])
        assert out.total is task and out.aux_losses == []

    def test_sum(self):
        out = combine(Tensor(1.0), [Tensor(0.01), Tensor(0.01)], dropped_tokens=3, tokens=40)
        assert out.total.item() == pytest.approx(1.02, abs=1e-15)
        assert out.to_record()["dropped_tokens"] == 3

    def test_gate_gradients_iff_aux(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(6, 3)), requires_grad=True)
        stats = load_stats(softmax(logits))
        combine(Tensor(1.0, requires_grad=True), []).total.backward()
        assert logits.grad is None
        combine(Tensor(1.0, requires_grad=True), [aux_loss(stats, 0.01)]).total.backward()
        assert logits.grad is not None and np.abs(logits.grad).sum() > 0


def test_gradient_steps_decrease_loss():
    rng = np.random.default_rng(3)
    raw = Tensor(rng.normal(size=(4, 3, 4)), requires_grad=True)
    logits = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    targets = np.array([[1, 2, 0], [3, 3, 4]])
    opt = AdamW([raw, logits], OptimizerConfig(lr=0.05, warmup_steps=0, weight_decay=0.0))
    history = []
    for _ in range(50):
        raw.grad = logits.grad = None
        total = rnnt_loss_forward(log_softmax(raw, axis=-1), [0, 2], 3) + cross_entropy(logits, targets)
        history.append(total.item())
        total.backward()
        opt.step()
    assert all(b < a for a, b in zip(history, history[1:]))
