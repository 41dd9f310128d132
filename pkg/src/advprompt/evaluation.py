"""Standard/robust accuracy, confusion matrices, the regularizer ablation
driver, and the inference-overhead benchmark.

The default evaluation threat model is prompt-aware: the attacker optimizes
against the full prompted pipeline (universal prompt or selection rule). A
prompt-oblivious evaluation is available by passing an attack spec with
``threat_model="bare"``. A sample counts as robust only when the prompted
prediction on its adversarial input equals the true label, so selection
errors count as failures.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .attack import AttackSpec, pgd_attack
from .core import (ClassifierHandle, ClassPromptSet, DatasetSplit,
                   LabeledImageBatch, PromptTemplate, ShapeMismatchError,
                   argmax_smallest)
from .objectives import ABLATION_SETTINGS
from .selection import prompted_predict, prompted_predict_universal
from .training import TrainConfig, train_prompts

__all__ = [
    "EvalReport",
    "TimingReport",
    "evaluate_standard",
    "evaluate_robust",
    "confusion_matrix",
    "run_ablation",
    "benchmark_inference",
    "build_report",
    "render_accuracy_table",
    "render_ablation_table",
]

Defense = PromptTemplate | ClassPromptSet | None


def _predictor(defense: Defense, model: ClassifierHandle):
    if defense is None:
        return lambda b: model.predict(b.images)
    if isinstance(defense, PromptTemplate):
        return lambda b: prompted_predict_universal(b, defense, model)
    return lambda b: prompted_predict(b, defense, model)


def _attack_arguments(defense: Defense, spec: AttackSpec) -> Defense:
    """Validate threat-model/defense consistency; return the prompt argument
    handed to the attack (None for oblivious attacks)."""
    if spec.threat_model == "bare":
        return None
    if spec.threat_model == "prompt-aware-universal":
        if not isinstance(defense, PromptTemplate):
            raise ValueError("prompt-aware-universal evaluation needs a universal prompt defense")
        return defense
    if not isinstance(defense, ClassPromptSet):
        raise ValueError("prompt-aware-classwise evaluation needs a class-wise prompt defense")
    return defense


def evaluate_standard(data: DatasetSplit, defense: Defense,
                      model: ClassifierHandle) -> float:
    """Fraction of benign samples whose (prompted) prediction is correct."""
    if len(data) == 0:
        raise ValueError("empty evaluation split")
    predict = _predictor(defense, model)
    correct = sum(int((predict(b) == b.labels).sum()) for b in data.batches)
    return correct / len(data)


def evaluate_robust(data: DatasetSplit, defense: Defense, model: ClassifierHandle,
                    spec: AttackSpec, step_counts: Sequence[int] = (10,),
                    seed: int = 0) -> dict[int, float]:
    """Accuracy under PGD-k for each requested step count k.

    k = 0 is, by definition, the standard accuracy and is computed as such.
    """
    if len(data) == 0:
        raise ValueError("empty evaluation split")
    predict = _predictor(defense, model)
    out: dict[int, float] = {}
    for k in step_counts:
        if k == 0:
            out[0] = evaluate_standard(data, defense, model)
            continue
        spec_k = replace(spec, steps=k)
        prompt_arg = _attack_arguments(defense, spec_k)
        correct = 0
        for idx, batch in enumerate(data.batches):
            gen = torch.Generator().manual_seed(seed * 1_000_003 + k * 1_009 + idx)
            adv = pgd_attack(batch, model, spec_k, prompts=prompt_arg, generator=gen)
            correct += int((predict(adv) == batch.labels).sum())
        out[k] = correct / len(data)
    return out


def confusion_matrix(data: DatasetSplit, prompts: ClassPromptSet,
                     model: ClassifierHandle) -> np.ndarray:
    """N x N counts; rows are true classes, columns selected prompt indices."""
    if len(data) == 0:
        raise ValueError("empty evaluation split")
    n = model.n_classes
    mat = np.zeros((n, n), dtype=np.int64)
    for batch in data.batches:
        chosen = prompted_predict(batch, prompts, model)
        for t, c in zip(batch.labels.tolist(), chosen.tolist()):
            mat[t, c] += 1
    return mat


@dataclass
class EvalReport:
    """Evaluation summary for one defense."""

    defense_kind: str
    threat_model: str
    standard_accuracy: float
    robust_accuracy: dict[int, float] = field(default_factory=dict)
    confusion: np.ndarray | None = None
    selection_error: float | None = None
    timing: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "defense_kind": self.defense_kind,
            "threat_model": self.threat_model,
            "standard_accuracy": self.standard_accuracy,
            "robust_accuracy": {str(k): v for k, v in self.robust_accuracy.items()},
            "confusion": None if self.confusion is None else self.confusion.tolist(),
            "selection_error": self.selection_error,
            "timing": self.timing,
        }

    def write_confusion_csv(self, path: str | Path) -> None:
        if self.confusion is None:
            raise ValueError("report carries no confusion matrix")
        np.savetxt(path, self.confusion, fmt="%d", delimiter=",")


def build_report(data: DatasetSplit, defense: Defense, model: ClassifierHandle,
                 spec: AttackSpec, step_counts: Sequence[int] = (0, 10),
                 seed: int = 0) -> EvalReport:
    """Standard + robust accuracies, plus selection stats for class-wise defenses."""
    kind = ("none" if defense is None
            else "universal" if isinstance(defense, PromptTemplate) else "class-wise")
    std = evaluate_standard(data, defense, model)
    robust = evaluate_robust(data, defense, model, spec,
                             [k for k in step_counts], seed=seed)
    report = EvalReport(defense_kind=kind, threat_model=spec.threat_model,
                        standard_accuracy=std, robust_accuracy=robust)
    if isinstance(defense, ClassPromptSet):
        mat = confusion_matrix(data, defense, model)
        report.confusion = mat
        report.selection_error = 1.0 - np.trace(mat) / mat.sum()
    return report


def render_accuracy_table(rows: list[tuple[str, float, dict[int, float]]],
                          step_counts: Sequence[int]) -> str:
    """Text table: one row per method, standard accuracy then PGD-k columns."""
    ks = [k for k in step_counts if k != 0]
    header = ["Method", "Std acc (%)"] + [f"PGD-{k} (%)" for k in ks]
    lines = [" | ".join(f"{h:>12s}" for h in header)]
    lines.append("-+-".join("-" * 12 for _ in header))
    for name, std, robust in rows:
        cells = [f"{name:>12s}", f"{100 * std:12.2f}"]
        cells += [f"{100 * robust.get(k, float('nan')):12.2f}" for k in ks]
        lines.append(" | ".join(cells))
    return "\n".join(lines)


def run_ablation(data: DatasetSplit, model: ClassifierHandle, base_cfg: TrainConfig,
                 eval_data: DatasetSplit | None = None, attack_steps: int = 10,
                 verbose: bool = False) -> list[dict[str, Any]]:
    """Train one class-wise prompt set per regularizer subset S1..S7 and
    report standard and PGD-k accuracies for each."""
    eval_data = eval_data if eval_data is not None else data
    rows: list[dict[str, Any]] = []
    for name, enabled in ABLATION_SETTINGS.items():
        cfg = replace(base_cfg, mode="c-avp",
                      loss=replace(base_cfg.loss, enabled_regularizers=enabled))
        prompts, _ = train_prompts(data, model, cfg, verbose=False)
        spec = replace(cfg.attack, threat_model="prompt-aware-classwise")
        std = evaluate_standard(eval_data, prompts, model)
        robust = evaluate_robust(eval_data, prompts, model, spec,
                                 [attack_steps], seed=cfg.seed)[attack_steps]
        row = {"setting": name, "regularizers": sorted(enabled),
               "standard_accuracy": std, "robust_accuracy": robust}
        rows.append(row)
        if verbose:
            print(f"{name}: std {100 * std:.2f}% robust {100 * robust:.2f}% "
                  f"({'+'.join(sorted(enabled)) or 'none'})")
    return rows


def render_ablation_table(rows: list[dict[str, Any]], attack_steps: int = 10) -> str:
    header = f"{'Setting':>8s} | {'l1':>3s} {'l2':>3s} {'l3':>3s} | " \
             f"{'Std acc (%)':>12s} | PGD-{attack_steps} acc (%)"
    lines = [header, "-" * len(header)]
    for row in rows:
        marks = ["yes" if f"l{q}" in row["regularizers"] else " . " for q in (1, 2, 3)]
        lines.append(f"{row['setting']:>8s} | {marks[0]} {marks[1]} {marks[2]} | "
                     f"{100 * row['standard_accuracy']:12.2f} | "
                     f"{100 * row['robust_accuracy']:12.2f}")
    return "\n".join(lines)


@dataclass
class TimingReport:
    """Inference-time ratio of defended over bare inference."""

    ratio: float
    trial_ratios: list[float]
    bare_seconds: float
    defended_seconds: float

    @property
    def spread(self) -> tuple[float, float]:
        return min(self.trial_ratios), max(self.trial_ratios)


def benchmark_inference(model: ClassifierHandle, defense: Defense,
                        n_trials: int = 9, batch: LabeledImageBatch | None = None,
                        warmup: int = 2) -> TimingReport:
    """Median wall-clock ratio of defended to bare inference on one batch.

    Runs are serial and interleaved (bare, defended, bare, ...) so drift hits
    both arms equally. The defended arm for a class-wise defense is the
    single widened forward of the selection rule.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if batch is None:
        if model.input_shape is None:
            raise ValueError("pass a batch or a handle with input_shape set")
        gen = torch.Generator().manual_seed(0)
        images = torch.rand((64, *model.input_shape), generator=gen)
        batch = LabeledImageBatch(images, torch.zeros(64, dtype=torch.int64))
    predict = _predictor(defense, model)

    def bare() -> None:
        with torch.no_grad():
            argmax_smallest(model.forward(batch.images))

    def defended() -> None:
        predict(batch)

    for _ in range(warmup):
        bare()
        defended()
    bare_times, defended_times = [], []
    for _ in range(n_trials):
        t0 = time.perf_counter()
        bare()
        t1 = time.perf_counter()
        defended()
        t2 = time.perf_counter()
        bare_times.append(t1 - t0)
        defended_times.append(t2 - t1)
    ratios = sorted(d / b for d, b in zip(defended_times, bare_times))
    return TimingReport(ratio=float(np.median(ratios)), trial_ratios=ratios,
                        bare_seconds=float(np.median(bare_times)),
                        defended_seconds=float(np.median(defended_times)))
