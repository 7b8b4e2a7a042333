import csv
import dataclasses
import json

import numpy as np
import pytest

from moe_asr.cli import apply_overrides, build_grid, main, parse_assignment
from moe_asr.data import SyntheticTask, Utterance, generate_corpus
from moe_asr.errors import DimensionError, ParameterError, TrainingDivergedError
from moe_asr.models import LabelDecoderConfig, ModelConfig, build_model, expert_ffn_parameters
from moe_asr.moe import RouterConfig
from moe_asr.optim import OptimizerConfig
from moe_asr.train import (
    TrainConfig,
    ablation,
    dispatch_entropy,
    evaluate,
    load_model,
    train,
)

TASK = SyntheticTask(num_languages=2, feature_dim=6, vocab_size=5, target_length_range=(2, 4))


def small_model(family="s2s", **kw):
    base = dict(
        family=family, d_feat=6, d_model=8, n_heads=2, encoder_layers=2, decoder_layers=1, d_ff=12,
        vocab_size=5, conv_channels=2, d_joint=8, label_decoder=LabelDecoderConfig(4, 1, 8),
    )
    base.update(kw)
    return ModelConfig(**base)


def small_train(tmp_path=None, **kw):
    base = dict(
        model=small_model(), optimizer=OptimizerConfig(lr=1e-3, warmup_steps=2), batch_size=4,
        max_steps=3, seed=0, output_dir=str(tmp_path) if tmp_path else None,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(TASK, 24, "train"), generate_corpus(TASK, 6, "eval")


class TestTrainConfig:
    def test_roundtrip(self):
        cfg = small_train(model=small_model(moe_every=2))
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"max_steps": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            small_train(**kw)


class TestTrain:
    def test_zero_steps(self, tmp_path, corpus):
        result = train(small_train(tmp_path, max_steps=0), corpus[0])
        assert [p.name for p in result.checkpoints] == ["step_0.ckpt"]
        assert result.metrics == []
        assert (tmp_path / "metrics.jsonl").read_text() == ""

    def test_metrics_complete(self, tmp_path, corpus):
        cfg = small_train(tmp_path, model=small_model(moe_every=1), max_steps=4, eval_every=2)
        result = train(cfg, corpus[0], corpus[1])
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in lines]
        assert [r["step"] for r in records] == [1, 2, 3, 4]
        for r in records:
            # two encoder blocks and one decoder block, all MoE
            assert len(r["routing"]) == 3 and len(r["aux_losses"]) == 3
            assert r["total"] == pytest.approx(r["task_loss"] + sum(r["aux_losses"]), abs=1e-12)
            assert all(sum(layer["f"]) == pytest.approx(1.0) for layer in r["routing"])
        assert [p.name for p in result.checkpoints] == ["step_0.ckpt", "step_2.ckpt", "step_4.ckpt"]
        assert [e["step"] for e in result.evaluations] == [2, 4]

    def test_deterministic(self, tmp_path, corpus):
        cfg = small_train(model=small_model("tt", moe_every=2, dropout_p=0.2), max_steps=3)
        a = train(dataclasses.replace(cfg, output_dir=str(tmp_path / "a")), corpus[0])
        train(dataclasses.replace(cfg, output_dir=str(tmp_path / "b")), corpus[0])
        assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()
        assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
        c = train(dataclasses.replace(cfg, seed=1), corpus[0])
        assert c.metrics[0]["total"] != a.metrics[0]["total"]

    def test_divergence(self, corpus):
        bad = [Utterance(u.features * np.nan, u.targets, u.language) for u in corpus[0]]
        with pytest.raises(TrainingDivergedError) as info:
            train(small_train(), bad)
        assert info.value.step == 1

    def test_empty_corpus(self):
        with pytest.raises(ParameterError):
            train(small_train(), [])

    def test_checkpoint_reload(self, tmp_path, corpus):
        result = train(small_train(tmp_path), corpus[0])
        model, header = load_model(tmp_path / "model.ckpt")
        assert header["step"] == 3
        for name, value in result.model.state_dict().items():
            np.testing.assert_array_equal(model.state_dict()[name], value)


class TestEvaluate:
    def test_report(self, tmp_path, corpus):
        train(small_train(tmp_path, model=small_model(moe_every=2)), corpus[0])
        report = evaluate(tmp_path / "model.ckpt", corpus[1])
        assert set(report) >= {"per_language", "overall", "tokens", "drop_rate"}
        json.dumps(report)

    def test_dimension_mismatch(self, corpus):
        model = build_model(small_model(d_feat=5), 0)
        with pytest.raises(DimensionError):
            evaluate(model, corpus[1])

    def test_transducer(self, corpus):
        report = evaluate(build_model(small_model("tt"), 0), corpus[1])
        assert report["tokens"] == sum(len(u.targets) for u in corpus[1])

    def test_dispatch_entropy(self, corpus):
        model = build_model(small_model(moe_every=1), 0)
        out = dispatch_entropy(model, corpus[1])
        assert len(out["layers"]) == 3
        for row in out["layers"]:
            assert all(0.0 <= h <= np.log(4) + 1e-12 for h in row.values())


class TestAblation:
    def test_dense_vs_moe(self, tmp_path, corpus):
        dense = small_model()
        moe = small_model(moe_every=2, router=RouterConfig(num_experts=4))
        rows = ablation([("dense", dense), ("moe4", moe)], small_train(tmp_path, max_steps=2), *corpus, tmp_path / "t.csv")
        assert len(rows) == 2
        # one MoE block (the second encoder block); the gate adds d_model x N weights
        delta = rows[1]["params"] - rows[0]["params"]
        assert delta == 3 * expert_ffn_parameters(8, 12) + 8 * 4
        with open(tmp_path / "t.csv") as fh:
            table = list(csv.DictReader(fh))
        assert [r["model"] for r in table] == ["dense", "moe4"]
        assert {"experts", "params", "streaming", "lang_id", "overall", "rate_0", "rate_1"} <= set(table[0])

    def test_identical_rows(self, corpus):
        cfg = small_model("tt")
        rows = ablation([("a", cfg), ("b", cfg)], small_train(max_steps=2), *corpus)
        assert {k: v for k, v in rows[0].items() if k != "model"} == {k: v for k, v in rows[1].items() if k != "model"}

    def test_language_id_axis(self, corpus):
        grid = build_grid(small_model("tt"), ["lang_id"], 4, num_languages=2)
        rows = ablation(grid, small_train(max_steps=1), *corpus)
        assert [r["lang_id"] for r in rows] == [False, True]

    def test_needs_two_configs(self, corpus):
        with pytest.raises(ParameterError):
            ablation([("a", small_model())], small_train(), *corpus)


class TestCli:
    def test_overrides(self):
        cfg = apply_overrides({"model": {"router": {"num_experts": 4}}}, [parse_assignment("model.router.num_experts=8"), parse_assignment("optimizer.kind=adamw")])
        assert cfg == {"model": {"router": {"num_experts": 8}}, "optimizer": {"kind": "adamw"}}

    def test_seed_required(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["train", "--output-dir", str(tmp_path), "--corpus", "x.npz"])
        with pytest.raises(SystemExit):
            main(["ablate", "--output-dir", str(tmp_path), "--corpus", "x.npz", "--eval-corpus", "y.npz"])

    def test_end_to_end(self, tmp_path, capsys):
        data, run = tmp_path / "data", tmp_path / "run"
        model_sets = [
            "--set", "model.d_feat=6", "--set", "model.vocab_size=5", "--set", "model.d_model=8",
            "--set", "model.n_heads=2", "--set", "model.d_ff=12", "--set", "model.conv_channels=2",
        ]
        assert main([
            "generate", "--output-dir", str(data), "--seed", "4", "--num-train", "16", "--num-eval", "4",
            "--set", "feature_dim=6", "--set", "vocab_size=5", "--set", "num_languages=2",
        ]) == 0
        assert main([
            "train", "--output-dir", str(run), "--seed", "1", "--corpus", str(data / "train.npz"),
            "--eval-corpus", str(data / "eval.npz"), "--set", "max_steps=2", "--set", "batch_size=2", *model_sets,
        ]) == 0
        assert len((run / "metrics.jsonl").read_text().splitlines()) == 2
        assert json.loads((run / "config.json").read_text())["seed"] == 1
        assert main(["evaluate", "--output-dir", str(run / "eval"), "--checkpoint", str(run / "model.ckpt"), "--corpus", str(data / "eval.npz")]) == 0
        assert "overall" in json.loads((run / "eval/report.json").read_text())
        assert main([
            "ablate", "--output-dir", str(tmp_path / "ab"), "--seed", "0", "--corpus", str(data / "train.npz"),
            "--eval-corpus", str(data / "eval.npz"), "--set", "max_steps=1", "--set", "batch_size=2", *model_sets,
        ]) == 0
        rows = list(csv.DictReader(open(tmp_path / "ab/ablation.csv")))
        assert [r["model"] for r in rows] == ["dense", "dense+moe4"]

    def test_reports_errors(self, tmp_path, capsys):
        assert main(["evaluate", "--output-dir", str(tmp_path), "--checkpoint", str(tmp_path / "none"), "--corpus", str(tmp_path / "none.npz")]) == 2
        assert "error:" in capsys.readouterr().err
