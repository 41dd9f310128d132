"""Command-line driver: train prompts, evaluate defenses, run the ablation
grid, benchmark inference overhead, and export prompt images.

Exit codes: 0 success, 2 invalid configuration (the offending field is
printed), 3 shape or class-count mismatch between artifacts, 1 anything else.
All outputs of a command land in its run directory next to a
``run_manifest.json`` listing them.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .attack import AttackSpec
from .config import ConfigError, load_data_section, parse_experiment_config
from .container import ContainerError, load_container, save_container
from .core import ClassPromptSet, LabeledImageBatch, PromptTemplate, \
    ShapeMismatchError, apply_prompt
from .data import load_tensor_dir
from .evaluation import (benchmark_inference, build_report, render_ablation_table,
                         render_accuracy_table, run_ablation)
from .training import train_prompts
from .zoo import CheckpointError, CheckpointShapeError, load_checkpoint

__all__ = ["main", "cmd_train", "cmd_eval", "cmd_ablate", "cmd_bench",
           "cmd_export_images"]


def _write_manifest(out_dir: Path, command: str, artifacts: list[str],
                    extra: dict | None = None) -> None:
    manifest = {"command": command, "artifacts": artifacts}
    if extra:
        manifest.update(extra)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2))


def cmd_train(config_path: str, verbose: bool = False) -> int:
    exp = parse_experiment_config(config_path)
    train_data, test_data = exp.data.build()
    model = exp.model.build(train_data, test_data, verbose=verbose)
    prompts, history = train_prompts(train_data, model, exp.train, verbose=verbose)

    out_dir = exp.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    final = history.final()
    metrics = {"probe_standard_accuracy": final.get("probe_standard_accuracy"),
               "probe_robust_accuracy": final.get("probe_robust_accuracy"),
               "objective": final.get("objective")}
    container_path = out_dir / "prompts.vpc"
    save_container(container_path, prompts, exp.train, metrics)
    history.write_jsonl(out_dir / "history.jsonl")
    _write_manifest(out_dir, "train", ["prompts.vpc", "history.jsonl"],
                    {"config": str(config_path), "train_config": exp.train.to_dict()})

    n_prompts = 1 if isinstance(prompts, PromptTemplate) else len(prompts)
    print(f"mode {exp.train.mode}: trained {n_prompts} prompt(s) "
          f"-> {container_path}")
    print(f"final probe standard accuracy {metrics['probe_standard_accuracy']:.4f}, "
          f"robust accuracy {metrics['probe_robust_accuracy']:.4f}")
    return 0


def _load_eval_data(data_path: str, image_shape, n_classes: int):
    p = Path(data_path)
    if p.is_dir():
        sub = p / "test" if (p / "test").is_dir() else p
        return load_tensor_dir(sub, image_shape, n_classes)
    import configparser
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read(p)
    return load_data_section(parser).build()[1]


def cmd_eval(container_path: str, model_path: str, data_path: str,
             pgd_steps: list[int], threat_model: str = "aware", seed: int = 0,
             epsilon: float = 8 / 255, out: str | None = None) -> int:
    prompts, header = load_container(container_path)
    model = load_checkpoint(model_path)
    shape = tuple(header["tensor_shape"])
    if isinstance(prompts, ClassPromptSet) and len(prompts) != model.n_classes:
        raise ShapeMismatchError(
            f"container has {len(prompts)} prompts, model has {model.n_classes} classes")
    data = _load_eval_data(data_path, shape, model.n_classes)
    if data.image_shape != shape:
        raise ShapeMismatchError(
            f"data images {data.image_shape} vs container tensors {shape}")
    if data.n_classes != model.n_classes:
        raise ShapeMismatchError(
            f"data has {data.n_classes} classes, model has {model.n_classes}")

    if threat_model == "oblivious":
        tm = "bare"
    elif isinstance(prompts, ClassPromptSet):
        tm = "prompt-aware-classwise"
    else:
        tm = "prompt-aware-universal"
    spec = AttackSpec(epsilon=epsilon, threat_model=tm)
    report = build_report(data, prompts, model, spec, pgd_steps, seed=seed)

    name = header.get("mode", report.defense_kind)
    table = render_accuracy_table(
        [(name, report.standard_accuracy, report.robust_accuracy)], pgd_steps)
    print(f"threat model: {threat_model} ({tm})")
    print(table)
    if report.selection_error is not None:
        print(f"selection error: {report.selection_error:.4f}")

    out_dir = Path(out) if out else Path(container_path).parent / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out_dir / "table.txt").write_text(table + "\n")
    artifacts = ["report.json", "table.txt"]
    if report.confusion is not None:
        report.write_confusion_csv(out_dir / "confusion.csv")
        artifacts.append("confusion.csv")
    _write_manifest(out_dir, "eval", artifacts,
                    {"container": str(container_path), "model": str(model_path),
                     "threat_model": threat_model})
    return 0


def cmd_ablate(config_path: str, out: str | None = None, verbose: bool = False) -> int:
    exp = parse_experiment_config(config_path)
    train_data, test_data = exp.data.build()
    model = exp.model.build(train_data, test_data, verbose=verbose)
    rows = run_ablation(train_data, model, exp.train, eval_data=test_data,
                        attack_steps=exp.train.attack.steps, verbose=verbose)
    table = render_ablation_table(rows, exp.train.attack.steps)
    print(table)
    out_dir = Path(out) if out else exp.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2))
    (out_dir / "ablation.txt").write_text(table + "\n")
    _write_manifest(out_dir, "ablate", ["ablation.json", "ablation.txt"],
                    {"config": str(config_path)})
    return 0


def cmd_bench(model_path: str, container_path: str | None = None,
              trials: int = 9, batch_size: int = 64) -> int:
    model = load_checkpoint(model_path)
    defense = None
    if container_path:
        defense, _ = load_container(container_path)
        if isinstance(defense, ClassPromptSet) and len(defense) != model.n_classes:
            raise ShapeMismatchError(
                f"container has {len(defense)} prompts, model has {model.n_classes} classes")
    shape = model.input_shape or (3, 32, 32)
    gen = torch.Generator().manual_seed(0)
    batch = LabeledImageBatch(torch.rand((batch_size, *shape), generator=gen),
                              torch.zeros(batch_size, dtype=torch.int64))
    timing = benchmark_inference(model, defense, n_trials=trials, batch=batch)
    lo, hi = timing.spread
    kind = "none" if defense is None else \
        "universal" if isinstance(defense, PromptTemplate) else "class-wise"
    print(f"defense: {kind}")
    print(f"inference-time ratio: {timing.ratio:.3f}x (trials {lo:.3f}-{hi:.3f}, "
          f"bare {timing.bare_seconds * 1e3:.2f} ms, "
          f"defended {timing.defended_seconds * 1e3:.2f} ms)")
    return 0


def _to_png(array: np.ndarray, path: Path) -> None:
    from PIL import Image
    arr = np.clip(array, 0.0, 1.0)
    arr = (arr * 255.0).round().astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path)


def cmd_export_images(container_path: str, out: str, data_path: str | None = None) -> int:
    prompts, header = load_container(container_path)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    templates = [prompts] if isinstance(prompts, PromptTemplate) else list(prompts.prompts)
    artifacts = []
    for i, tpl in enumerate(templates):
        # Prompt values live in [-1, 1]; render them centered at mid-gray.
        path = out_dir / f"prompt_{i}.png"
        _to_png((tpl.values.numpy() + 1.0) / 2.0, path)
        artifacts.append(path.name)
    if data_path:
        data = _load_eval_data(data_path, tuple(header["tensor_shape"]),
                               max(len(templates), int(header["n_classes"])))
        for i, tpl in enumerate(templates):
            idx = (data.labels == i).nonzero().flatten()
            if len(idx) == 0:
                continue
            sample = LabeledImageBatch(data.images[idx[:1]], data.labels[idx[:1]])
            prompted = apply_prompt(sample, tpl)
            path = out_dir / f"prompted_sample_{i}.png"
            _to_png(prompted.images[0].numpy(), path)
            artifacts.append(path.name)
    _write_manifest(out_dir, "export-images", artifacts,
                    {"container": str(container_path)})
    print(f"wrote {len(artifacts)} image(s) to {out_dir}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advprompt",
        description="Train and evaluate adversarial visual prompts for a frozen classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train prompts from an experiment config")
    p.add_argument("config")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("eval", help="evaluate a prompt container")
    p.add_argument("container")
    p.add_argument("model", help="base-classifier checkpoint")
    p.add_argument("data", help="experiment config (its [data] section) or a tensor directory")
    p.add_argument("--pgd-steps", default="0,10",
                   help="comma-separated PGD step counts (0 = standard accuracy)")
    p.add_argument("--threat-model", choices=("aware", "oblivious"), default="aware")
    p.add_argument("--epsilon", type=float, default=8 / 255)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("ablate", help="run the 7-setting regularizer ablation")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("bench", help="measure defended vs bare inference time")
    p.add_argument("model")
    p.add_argument("--container", default=None)
    p.add_argument("--trials", type=int, default=9)
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("export-images", help="dump prompt tensors (and prompted samples) as PNGs")
    p.add_argument("container")
    p.add_argument("out")
    p.add_argument("--data", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, verbose=args.verbose)
        if args.command == "eval":
            steps = [int(s) for s in str(args.pgd_steps).split(",") if s.strip() != ""]
            return cmd_eval(args.container, args.model, args.data, steps,
                            threat_model=args.threat_model, seed=args.seed,
                            epsilon=args.epsilon, out=args.out)
        if args.command == "ablate":
            return cmd_ablate(args.config, out=args.out, verbose=args.verbose)
        if args.command == "bench":
            return cmd_bench(args.model, args.container, trials=args.trials,
                             batch_size=args.batch_size)
        return cmd_export_images(args.container, args.out, data_path=args.data)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ShapeMismatchError, CheckpointShapeError) as exc:
        print(f"shape mismatch: {exc}", file=sys.stderr)
        return 3
    except (ContainerError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
