"""Command-line entry point: ``moe-asr {generate,train,evaluate,ablate}``.

Configuration values are addressed by their JSON path, e.g.
``--set model.router.num_experts=8 --set optimizer.lr=1e-3``. Values are
parsed as JSON when possible and kept as strings otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import SyntheticTask, generate_corpus, load_corpus, save_corpus
from .errors import DimensionError, ParameterError, TrainingDivergedError
from .models import PRESETS, ModelConfig, StreamingConfig
from .train import TrainConfig, ablation, evaluate, train

log = logging.getLogger("moe_asr")


def parse_assignment(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected PATH=VALUE, got {text!r}")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.split("."), value


def apply_overrides(config: dict, assignments: list[tuple[list[str], object]]) -> dict:
    """Set nested keys of a JSON-like dict; intermediate ``null`` values become dicts."""
    config = json.loads(json.dumps(config))
    for keys, value in assignments:
        node = config
        for key in keys[:-1]:
            if node.get(key) is None:
                node[key] = {}
            node = node[key]
        node[keys[-1]] = value
    return config


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def build_train_config(args: argparse.Namespace) -> TrainConfig:
    base = _load_json(args.config)
    if args.preset:
        base["model"] = PRESETS[args.preset].to_dict() | base.get("model", {})
    base = apply_overrides(base, args.set or [])
    base["seed"] = args.seed
    base["output_dir"] = str(args.output_dir)
    return TrainConfig.from_dict(base)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args: argparse.Namespace) -> int:
    fields = apply_overrides(_load_json(args.config), args.set or [])
    if args.seed is not None:
        fields["seed"] = args.seed
    task = SyntheticTask.from_dict(fields)
    out = Path(args.output_dir)
    save_corpus(out / "train.npz", generate_corpus(task, args.num_train, "train"), task)
    save_corpus(out / "eval.npz", generate_corpus(task, args.num_eval, "eval"), task)
    _write_json(out / "task.json", task.to_dict())
    log.info("wrote %d train and %d eval utterances to %s", args.num_train, args.num_eval, out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_train_config(args)
    corpus, _ = load_corpus(args.corpus)
    eval_corpus = load_corpus(args.eval_corpus)[0] if args.eval_corpus else None
    out = Path(args.output_dir)
    _write_json(out / "config.json", cfg.to_dict())
    result = train(cfg, corpus, eval_corpus)
    if result.evaluations:
        _write_json(out / "evaluations.json", result.evaluations)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    corpus, _ = load_corpus(args.corpus)
    report = evaluate(args.checkpoint, corpus, max_symbols_per_frame=args.max_symbols_per_frame)
    _write_json(Path(args.output_dir) / "report.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


DEFAULT_AXES = ("experts",)


def build_grid(
    base: ModelConfig, axes: list[str], num_experts: int, num_languages: int = 3
) -> list[tuple[str, ModelConfig]]:
    """Cartesian grid over the named ablation axes, starting from a dense baseline."""
    grid = [("dense", dataclasses.replace(base, moe_every=0))]
    for axis in axes:
        expanded = []
        for name, cfg in grid:
            expanded.append((name, cfg))
            if axis == "experts":
                router = dataclasses.replace(cfg.router, num_experts=num_experts)
                expanded.append((f"{name}+moe{num_experts}", dataclasses.replace(cfg, moe_every=2, router=router)))
            elif axis == "streaming":
                expanded.append((f"{name}+stream", dataclasses.replace(cfg, streaming=StreamingConfig(left=4, right=2))))
            elif axis == "lang_id":
                expanded.append((f"{name}+langid", dataclasses.replace(cfg, language_id=num_languages)))
            elif axis == "label_moe":
                ld = dataclasses.replace(
                    cfg.label_decoder, moe_projection=dataclasses.replace(cfg.router, num_experts=num_experts)
                )
                expanded.append((f"{name}+labelmoe", dataclasses.replace(cfg, label_decoder=ld)))
            else:
                raise ParameterError(f"unknown ablation axis {axis!r}")
        grid = expanded
    return grid


def cmd_ablate(args: argparse.Namespace) -> int:
    base = build_train_config(args)
    corpus, task = load_corpus(args.corpus)
    eval_corpus, _ = load_corpus(args.eval_corpus)
    if args.grid:
        entries = _load_json(args.grid)
        grid = [
            (name, ModelConfig.from_dict(apply_overrides(base.model.to_dict(), _flatten(overrides))))
            for name, overrides in entries.items()
        ]
    else:
        num_languages = task.num_languages if task else 3
        grid = build_grid(base.model, args.axes.split(","), args.num_experts, num_languages)
    rows = ablation(grid, base, corpus, eval_corpus, Path(args.output_dir) / "ablation.csv")
    for row in rows:
        print(json.dumps(row))
    return 0


def _flatten(overrides: dict, prefix: tuple[str, ...] = ()) -> list[tuple[list[str], object]]:
    out = []
    for key, value in overrides.items():
        path = (*prefix, *key.split("."))
        if isinstance(value, dict) and value:
            out.extend(_flatten(value, path))
        else:
            out.append((list(path), value))
    return out


# --------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-asr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, seed_required: bool) -> None:
        p.add_argument("--output-dir", required=True, type=Path)
        p.add_argument("--seed", type=int, required=seed_required)
        p.add_argument("--config", help="JSON file with base configuration")
        p.add_argument("--set", action="append", type=parse_assignment, metavar="PATH=VALUE")

    p = sub.add_parser("generate", help="write a synthetic multi-language corpus")
    common(p, seed_required=False)
    p.add_argument("--num-train", type=int, default=2000)
    p.add_argument("--num-eval", type=int, default=200)
    p.set_defaults(func=cmd_generate)

    for name, func in (("train", cmd_train), ("ablate", cmd_ablate)):
        p = sub.add_parser(name, help=f"{name} from a generated corpus")
        common(p, seed_required=True)
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--corpus", required=True)
        p.add_argument("--eval-corpus", required=(name == "ablate"))
        p.set_defaults(func=func)
        if name == "ablate":
            p.add_argument("--grid", help="JSON object mapping row name to model overrides")
            p.add_argument("--axes", default=",".join(DEFAULT_AXES), help="comma list of experts,streaming,lang_id,label_moe")
            p.add_argument("--num-experts", type=int, default=4)

    p = sub.add_parser("evaluate", help="greedy-decode a corpus with a checkpoint")
    p.add_argument("--output-dir", required=True, type=Path)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-symbols-per-frame", type=int, default=3)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ParameterError, DimensionError, TrainingDivergedError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
