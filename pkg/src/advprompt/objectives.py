"""Training losses for universal and class-wise adversarial visual prompts.

Every loss is a differentiable scalar function of the prompt values. The
prediction loss is cross-entropy on the model's raw scores; the coupling
losses are CW-style hinge margins on the model confidences (raw scores by
default, softmax probabilities when the handle is configured that way), with
a floor of -tau.

Adversarial examples can be passed in precomputed (``adv_batch``), in which
case a loss is a pure function of the prompts; when omitted they are
generated internally with PGD and treated as constants, so gradients flow
through the outer loss only, never through the attack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .attack import AttackSpec, pgd_attack, pgd_attack_true_class
from .core import (ClassifierHandle, ClassPromptSet, LabeledImageBatch,
                   PromptTemplate, prompt_images)
from .selection import stacked_prompted_confidences

__all__ = [
    "LossConfig",
    "REGULARIZERS",
    "ABLATION_SETTINGS",
    "vp_loss",
    "adv_loss",
    "uavp_objective",
    "cavp_v0_objective",
    "cavp_loss1",
    "cavp_loss2",
    "cavp_loss3",
    "cavp_total",
]

REGULARIZERS = ("l1", "l2", "l3")

# Ablation grid over enabled coupling losses, S1 (none) through S7 (all).
ABLATION_SETTINGS: dict[str, frozenset[str]] = {
    "S1": frozenset(),
    "S2": frozenset({"l1"}),
    "S3": frozenset({"l2"}),
    "S4": frozenset({"l3"}),
    "S5": frozenset({"l1", "l2"}),
    "S6": frozenset({"l1", "l3"}),
    "S7": frozenset({"l1", "l2", "l3"}),
}


@dataclass(frozen=True)
class LossConfig:
    """Weights of the composite objectives.

    lambda_: weight on the standard (clean) term
    gamma:   weight on the coupling losses
    tau:     confidence margin; every coupling loss is floored at -tau
    enabled_regularizers: subset of {"l1", "l2", "l3"}
    """

    lambda_: float = 1.0
    gamma: float = 3.0
    tau: float = 0.1
    enabled_regularizers: frozenset[str] = field(
        default_factory=lambda: frozenset(REGULARIZERS))

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lambda_ < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")
        unknown = set(self.enabled_regularizers) - set(REGULARIZERS)
        if unknown:
            raise ValueError(f"unknown regularizers {sorted(unknown)}")


def _require_nonempty(batch: LabeledImageBatch) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")


# ---------------------------------------------------------------------------
# Universal-prompt objectives
# ---------------------------------------------------------------------------

def vp_loss(prompt: PromptTemplate, batch: LabeledImageBatch,
            model: ClassifierHandle) -> Tensor:
    """Mean cross-entropy of the model on the prompted batch."""
    _require_nonempty(batch)
    scores = model.forward(prompt_images(batch.images, prompt.values, prompt.mask))
    return F.cross_entropy(scores, batch.labels)


def adv_loss(prompt: PromptTemplate, batch: LabeledImageBatch, model: ClassifierHandle,
             spec: AttackSpec, adv_batch: LabeledImageBatch | None = None,
             generator: torch.Generator | None = None) -> Tensor:
    """Worst-case counterpart of ``vp_loss`` under a prompt-aware adversary."""
    _require_nonempty(batch)
    if spec.threat_model != "prompt-aware-universal":
        raise ValueError("adv_loss expects threat_model == prompt-aware-universal")
    if adv_batch is None:
        adv_batch = pgd_attack(batch, model, spec, prompts=prompt, generator=generator)
    return vp_loss(prompt, adv_batch, model)


def uavp_objective(prompt: PromptTemplate, batch: LabeledImageBatch,
                   model: ClassifierHandle, cfg: LossConfig, spec: AttackSpec,
                   adv_batch: LabeledImageBatch | None = None,
                   generator: torch.Generator | None = None) -> Tensor:
    """lambda * standard loss + adversarial loss for one universal prompt."""
    return (cfg.lambda_ * vp_loss(prompt, batch, model)
            + adv_loss(prompt, batch, model, spec, adv_batch, generator))


# ---------------------------------------------------------------------------
# Class-wise objectives
# ---------------------------------------------------------------------------

def _own_prompt_ce(prompts: ClassPromptSet, batch: LabeledImageBatch,
                   model: ClassifierHandle) -> Tensor:
    """Per-sample cross-entropy with each sample prompted by its label's prompt."""
    values = prompts.stacked_values()[batch.labels]
    scores = model.forward(prompt_images(batch.images, values, prompts.mask))
    return F.cross_entropy(scores, batch.labels, reduction="none")


def _classwise_mean(per_sample: Tensor, labels: Tensor, n_classes: int) -> Tensor:
    """Mean within each class, then averaged over all N classes; absent
    classes contribute zero."""
    sums = torch.zeros(n_classes, dtype=per_sample.dtype,
                       device=per_sample.device).index_add_(0, labels, per_sample)
    counts = torch.bincount(labels, minlength=n_classes).to(per_sample.dtype)
    means = torch.where(counts > 0, sums / counts.clamp(min=1), torch.zeros_like(sums))
    return means.sum() / n_classes


def cavp_v0_objective(prompts: ClassPromptSet, batch: LabeledImageBatch,
                      model: ClassifierHandle, cfg: LossConfig, spec: AttackSpec,
                      adv_batch: LabeledImageBatch | None = None,
                      generator: torch.Generator | None = None) -> Tensor:
    """Class-decomposed objective: per class, lambda * standard + adversarial
    terms with each sample prompted by its own class prompt."""
    _require_nonempty(batch)
    n = len(prompts)
    if adv_batch is None:
        adv_batch = pgd_attack_true_class(batch, model, spec, prompts, generator)
    clean = _classwise_mean(_own_prompt_ce(prompts, batch, model), batch.labels, n)
    adv = _classwise_mean(_own_prompt_ce(prompts, adv_batch, model), adv_batch.labels, n)
    return cfg.lambda_ * clean + adv


def _coupling_terms(conf: Tensor, labels: Tensor, tau: float) -> dict[str, Tensor]:
    """The three coupling losses from one stacked confidence tensor.

    conf[i, b, k] = f_k(x_b + prompt_i). ``matrix[b, i] = conf[i, b, i]`` is
    the selection score; ``true_under[b, k] = conf[k, b, y_b]`` is the true
    class's confidence under prompt k.
    """
    n, bsz, _ = conf.shape
    rows = torch.arange(bsz, device=conf.device)
    neg_inf = torch.tensor(float("-inf"), dtype=conf.dtype, device=conf.device)
    floor = torch.tensor(-tau, dtype=conf.dtype, device=conf.device)

    matrix = conf.permute(1, 0, 2).diagonal(dim1=1, dim2=2)     # [B, N]
    true_under = conf[:, rows, labels].transpose(0, 1)          # [B, N]
    true_score = matrix[rows, labels]                           # [B]

    # l1: best mismatched selection score vs the matched one.
    others = matrix.clone()
    others[rows, labels] = neg_inf
    l1 = torch.maximum(others.max(dim=1).values - true_score, floor).mean()

    # l2: prompt i acting as a class-i trigger on other classes' data.
    target_score = matrix.transpose(0, 1)                       # [N, B]
    gap = torch.maximum(target_score - true_under.transpose(0, 1), floor)
    mismatch = labels.unsqueeze(0) != torch.arange(n, device=conf.device).unsqueeze(1)
    counts = mismatch.sum(dim=1)
    sums = (gap * mismatch).sum(dim=1)
    per_class = torch.where(counts > 0, sums / counts.clamp(min=1), torch.zeros_like(sums))
    l2 = per_class.sum() / n

    # l3: true-class confidence under a mismatched prompt vs the matched one.
    mis = true_under.clone()
    mis[rows, labels] = neg_inf
    l3 = torch.maximum(mis.max(dim=1).values - true_score, floor).mean()

    return {"l1": l1, "l2": l2, "l3": l3}


def cavp_loss1(prompts: ClassPromptSet, batch: LabeledImageBatch,
               model: ClassifierHandle, tau: float) -> Tensor:
    """Selection-margin hinge: the matched prompt's own-class confidence must
    beat every mismatched prompt's own-class confidence by tau."""
    _require_nonempty(batch)
    conf = stacked_prompted_confidences(batch.images, prompts, model)
    return _coupling_terms(conf, batch.labels, tau)["l1"]


def cavp_loss2(prompts: ClassPromptSet, batch: LabeledImageBatch,
               model: ClassifierHandle, tau: float) -> Tensor:
    """Trigger-effect hinge: prompt i must not pull other classes' data
    toward class i; per-class mean over mismatched samples, averaged over N."""
    _require_nonempty(batch)
    conf = stacked_prompted_confidences(batch.images, prompts, model)
    return _coupling_terms(conf, batch.labels, tau)["l2"]


def cavp_loss3(prompts: ClassPromptSet, batch: LabeledImageBatch,
               model: ClassifierHandle, tau: float) -> Tensor:
    """Matched-gain hinge: the true class's confidence must be higher under
    its own prompt than under any mismatched prompt, by tau."""
    _require_nonempty(batch)
    conf = stacked_prompted_confidences(batch.images, prompts, model)
    return _coupling_terms(conf, batch.labels, tau)["l3"]


def cavp_total(prompts: ClassPromptSet, batch: LabeledImageBatch,
               model: ClassifierHandle, cfg: LossConfig, spec: AttackSpec,
               adv_batch: LabeledImageBatch | None = None,
               generator: torch.Generator | None = None,
               components: dict[str, float] | None = None) -> Tensor:
    """Class-decomposed objective plus gamma-weighted enabled coupling losses.

    With gamma == 0 or nothing enabled this returns the class-decomposed
    objective itself, bit for bit. Pass ``components`` to receive the value
    of each term (as floats) for logging.
    """
    base = cavp_v0_objective(prompts, batch, model, cfg, spec, adv_batch, generator)
    if components is not None:
        components["v0"] = float(base.detach())
    if cfg.gamma == 0 or not cfg.enabled_regularizers:
        return base
    conf = stacked_prompted_confidences(batch.images, prompts, model)
    terms = _coupling_terms(conf, batch.labels, cfg.tau)
    total = base
    for name in REGULARIZERS:
        if name in cfg.enabled_regularizers:
            total = total + cfg.gamma * terms[name]
        if components is not None:
            components[name] = float(terms[name].detach())
    return total
