"""Outer minimization: gradient descent on prompt values with a cosine
learning-rate schedule and projection after every update.

All four modes share one loop. Prompts start at zero, adversarial examples
are regenerated every step against the current prompts, and every update is
followed by projection onto the constraint set (values in [-1, 1], zero
off-mask). The base model is never touched. Given a seed, the run is
deterministic: batch order, attack initialization, and probe carving all
derive from it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

from .attack import AttackSpec, pgd_attack, pgd_attack_true_class
from .core import (ClassifierHandle, ClassPromptSet, DatasetSplit,
                   LabeledImageBatch, PromptTemplate, frame_mask,
                   full_mask_width)
from .objectives import (LossConfig, cavp_total, cavp_v0_objective,
                         uavp_objective, vp_loss)
from .selection import prompted_predict, prompted_predict_universal

__all__ = ["MODES", "TrainConfig", "TrainHistory", "train_prompts", "lr_at"]

MODES = ("vanilla-vp", "u-avp", "c-avp-v0", "c-avp")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a prompt-training run needs besides data and model.

    ``prompt_width`` is the border-frame width in pixels; -1 requests a
    full-image mask (resolved to the covering width at train time).
    """

    mode: str = "c-avp"
    loss: LossConfig = field(default_factory=LossConfig)
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(
        threat_model="prompt-aware-universal"))
    epochs: int = 20
    batch_size: int = 128
    lr_initial: float = 0.1
    lr_schedule: str = "cosine-to-zero"
    prompt_width: int = 8
    seed: int = 0
    probe_fraction: float = 0.1
    probe_max: int = 256

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be > 0")
        if self.lr_schedule != "cosine-to-zero":
            raise ValueError("only the cosine-to-zero schedule is supported")

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "loss": {"lambda": self.loss.lambda_, "gamma": self.loss.gamma,
                     "tau": self.loss.tau,
                     "enabled_regularizers": sorted(self.loss.enabled_regularizers)},
            "attack": {"epsilon": self.attack.epsilon, "steps": self.attack.steps,
                       "step_size": self.attack.step_size,
                       "random_init": self.attack.random_init,
                       "threat_model": self.attack.threat_model},
            "epochs": self.epochs, "batch_size": self.batch_size,
            "lr_initial": self.lr_initial, "lr_schedule": self.lr_schedule,
            "prompt_width": self.prompt_width, "seed": self.seed,
            "probe_fraction": self.probe_fraction, "probe_max": self.probe_max,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        loss = LossConfig(lambda_=d["loss"]["lambda"], gamma=d["loss"]["gamma"],
                          tau=d["loss"]["tau"],
                          enabled_regularizers=frozenset(d["loss"]["enabled_regularizers"]))
        attack = AttackSpec(**d["attack"])
        return cls(mode=d["mode"], loss=loss, attack=attack, epochs=d["epochs"],
                   batch_size=d["batch_size"], lr_initial=d["lr_initial"],
                   lr_schedule=d["lr_schedule"], prompt_width=d["prompt_width"],
                   seed=d["seed"], probe_fraction=d.get("probe_fraction", 0.1),
                   probe_max=d.get("probe_max", 256))


@dataclass
class TrainHistory:
    """Per-epoch records: objective mean, component means, probe accuracies."""

    records: list[dict[str, Any]] = field(default_factory=list)

    def append(self, record: dict[str, Any]) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    def final(self) -> dict[str, Any]:
        return self.records[-1] if self.records else {}


def lr_at(step: int, total_steps: int, lr_initial: float) -> float:
    """Cosine decay from lr_initial at step 0 to zero at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_initial * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _carve_probe(data: DatasetSplit, cfg: TrainConfig) -> tuple[DatasetSplit, DatasetSplit]:
    gen = torch.Generator().manual_seed(cfg.seed ^ 0x5EED)
    order = torch.randperm(len(data), generator=gen)
    n_probe = min(cfg.probe_max, int(len(data) * cfg.probe_fraction))
    if n_probe == 0:
        return data, data
    return data.subset(order[n_probe:]), data.subset(order[:n_probe])


def _probe_metrics(delta: torch.Tensor, mask: torch.Tensor, width: int, mode: str,
                   probe: LabeledImageBatch, model: ClassifierHandle,
                   attack: AttackSpec, generator: torch.Generator) -> tuple[float, float]:
    prompts = _wrap(delta, mask, width, mode)
    if isinstance(prompts, ClassPromptSet):
        spec = AttackSpec(epsilon=attack.epsilon, steps=attack.steps,
                          step_size=attack.step_size, random_init=attack.random_init,
                          threat_model="prompt-aware-classwise")
        predict = lambda b: prompted_predict(b, prompts, model)
    else:
        spec = AttackSpec(epsilon=attack.epsilon, steps=attack.steps,
                          step_size=attack.step_size, random_init=attack.random_init,
                          threat_model="prompt-aware-universal")
        predict = lambda b: prompted_predict_universal(b, prompts, model)
    std = float((predict(probe) == probe.labels).float().mean())
    adv = pgd_attack(probe, model, spec, prompts=prompts, generator=generator)
    rob = float((predict(adv) == probe.labels).float().mean())
    return std, rob


def _wrap(delta: torch.Tensor, mask: torch.Tensor, width: int,
          mode: str) -> PromptTemplate | ClassPromptSet:
    if mode in ("vanilla-vp", "u-avp"):
        return PromptTemplate(delta, mask, width)
    return ClassPromptSet(tuple(PromptTemplate(delta[i], mask, width)
                                for i in range(delta.shape[0])))


def train_prompts(data: DatasetSplit, model: ClassifierHandle, cfg: TrainConfig,
                  probe: DatasetSplit | None = None, verbose: bool = False,
                  ) -> tuple[PromptTemplate | ClassPromptSet, TrainHistory]:
    """Train prompts for the configured mode; returns (prompts, history).

    When no probe split is passed, a seeded slice of ``data`` is held out for
    the per-epoch probe accuracies and excluded from training.
    """
    if len(data) == 0:
        raise ValueError("empty training split")
    if probe is None:
        data, probe = _carve_probe(data, cfg)
    probe_batch = probe.as_batch()

    c, h, w = data.image_shape
    width = full_mask_width(h, w) if cfg.prompt_width == -1 else cfg.prompt_width
    mask = frame_mask(h, w, width)
    classwise = cfg.mode in ("c-avp-v0", "c-avp")
    if classwise:
        delta = torch.zeros(data.n_classes, c, h, w, requires_grad=True)
    else:
        delta = torch.zeros(c, h, w, requires_grad=True)

    gen = torch.Generator().manual_seed(cfg.seed)
    n_batches = math.ceil(len(data) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    history = TrainHistory()
    step = 0

    for epoch in range(cfg.epochs):
        epoch_loss, epoch_n = 0.0, 0
        comp_sums: dict[str, float] = {}
        for batch in data.iter_batches(cfg.batch_size, generator=gen):
            lr = lr_at(step, total_steps, cfg.lr_initial)
            prompts = _wrap(delta, mask, width, cfg.mode)
            components: dict[str, float] = {}

            if cfg.mode == "vanilla-vp":
                loss = vp_loss(prompts, batch, model)
                components["standard"] = float(loss.detach())
            elif cfg.mode == "u-avp":
                adv = pgd_attack(batch, model, cfg.attack, prompts=prompts,
                                 generator=gen)
                std = vp_loss(prompts, batch, model)
                robust = vp_loss(prompts, adv, model)
                loss = cfg.loss.lambda_ * std + robust
                components["standard"] = float(std.detach())
                components["adversarial"] = float(robust.detach())
            else:
                adv = pgd_attack_true_class(batch, model, cfg.attack, prompts,
                                            generator=gen)
                if cfg.mode == "c-avp-v0":
                    loss = cavp_v0_objective(prompts, batch, model, cfg.loss,
                                             cfg.attack, adv_batch=adv)
                    components["v0"] = float(loss.detach())
                else:
                    loss = cavp_total(prompts, batch, model, cfg.loss, cfg.attack,
                                      adv_batch=adv, components=components)

            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite objective ({float(loss)}) at epoch {epoch} step {step}")
            grad = torch.autograd.grad(loss, delta)[0]
            with torch.no_grad():
                delta -= lr * grad
                delta.clamp_(-1.0, 1.0)
                delta *= mask
            epoch_loss += float(loss.detach()) * len(batch)
            epoch_n += len(batch)
            for k, v in components.items():
                comp_sums[k] = comp_sums.get(k, 0.0) + v * len(batch)
            step += 1

        probe_gen = torch.Generator().manual_seed(cfg.seed * 1000003 + epoch)
        std_acc, rob_acc = _probe_metrics(delta.detach(), mask, width, cfg.mode,
                                          probe_batch, model, cfg.attack, probe_gen)
        record = {
            "epoch": epoch,
            "objective": epoch_loss / epoch_n,
            "components": {k: v / epoch_n for k, v in comp_sums.items()},
            "probe_standard_accuracy": std_acc,
            "probe_robust_accuracy": rob_acc,
            "lr": lr_at(min(step, total_steps), total_steps, cfg.lr_initial),
        }
        history.append(record)
        if verbose:
            print(f"[{cfg.mode}] epoch {epoch + 1}/{cfg.epochs} "
                  f"objective {record['objective']:.4f} "
                  f"probe std {std_acc:.3f} rob {rob_acc:.3f}")

    final = _wrap(delta.detach().clone(), mask, width, cfg.mode)
    return final, history
