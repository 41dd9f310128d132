"""PGD adversary under three threat models.

``bare`` attacks the plain classifier. ``prompt-aware-universal`` attacks the
classifier behind a fixed additive prompt. ``prompt-aware-classwise`` attacks
the full selection pipeline: at each step the prompt chosen by the selection
rule is held fixed, the loss is differentiated through that prompted forward,
and the selection is recomputed at the next step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor

from .core import (ClassifierHandle, ClassPromptSet, LabeledImageBatch,
                   PromptTemplate, argmax_smallest, prompt_images)

__all__ = ["AttackSpec", "pgd_attack", "pgd_attack_true_class"]

THREAT_MODELS = ("bare", "prompt-aware-universal", "prompt-aware-classwise")


@dataclass(frozen=True)
class AttackSpec:
    """PGD configuration: L-inf radius, iteration count, step size, init.

    ``step_size=None`` resolves to 2.5 * epsilon / steps, a schedule that can
    reach the ball boundary from any interior point.
    """

    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float | None = None
    random_init: bool = True
    threat_model: str = "bare"

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.threat_model not in THREAT_MODELS:
            raise ValueError(f"threat_model must be one of {THREAT_MODELS}")

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            if self.step_size <= 0 and self.steps > 0:
                raise ValueError("step_size must be > 0 when steps > 0")
            return self.step_size
        return 2.5 * self.epsilon / max(self.steps, 1)

    def with_steps(self, steps: int) -> "AttackSpec":
        return replace(self, steps=steps)


def _pgd_core(images: Tensor, loss_fn: Callable[[Tensor], Tensor], spec: AttackSpec,
              generator: torch.Generator | None) -> Tensor:
    """Shared ascent loop; returns adversarial images in the ball and [0,1]."""
    eps = spec.epsilon
    alpha = spec.resolved_step_size()
    x = images.detach()
    if spec.random_init and eps > 0:
        delta = torch.empty_like(x).uniform_(-eps, eps, generator=generator)
        delta = torch.clamp(x + delta, 0.0, 1.0) - x
    else:
        delta = torch.zeros_like(x)
    for _ in range(spec.steps):
        xa = (x + delta).detach().requires_grad_(True)
        with torch.enable_grad():
            loss = loss_fn(xa)
        grad = torch.autograd.grad(loss, xa)[0]
        delta = delta + alpha * grad.sign()
        delta = torch.clamp(delta, -eps, eps)
        delta = torch.clamp(x + delta, 0.0, 1.0) - x
    return x + delta


def _universal_loss(model: ClassifierHandle, labels: Tensor, values: Tensor,
                    mask: Tensor) -> Callable[[Tensor], Tensor]:
    def fn(xa: Tensor) -> Tensor:
        return F.cross_entropy(model.forward(prompt_images(xa, values, mask)), labels)
    return fn


def _classwise_loss(model: ClassifierHandle, labels: Tensor,
                    prompts: ClassPromptSet) -> Callable[[Tensor], Tensor]:
    values = prompts.stacked_values().detach()
    mask = prompts.mask

    def fn(xa: Tensor) -> Tensor:
        # Selection is recomputed here, at the top of every PGD step, then
        # held fixed for the gradient of this step.
        with torch.no_grad():
            n = len(prompts)
            stacked = prompt_images(xa.detach().unsqueeze(0), values.unsqueeze(1), mask)
            conf = model.confidences(stacked.reshape(-1, *xa.shape[1:]))
            conf = conf.reshape(n, xa.shape[0], model.n_classes)
            matrix = conf.permute(1, 0, 2).diagonal(dim1=1, dim2=2)
            selected = argmax_smallest(matrix)
        chosen = values[selected]
        return F.cross_entropy(model.forward(prompt_images(xa, chosen, mask)), labels)
    return fn


def pgd_attack(batch: LabeledImageBatch, model: ClassifierHandle, spec: AttackSpec,
               prompts: PromptTemplate | ClassPromptSet | None = None,
               generator: torch.Generator | None = None) -> LabeledImageBatch:
    """Run PGD against the configured threat model; labels pass through.

    The output satisfies ||x' - x||_inf <= epsilon and x' in [0, 1]
    elementwise. With epsilon == 0, or steps == 0 without random init, the
    input images are returned bit-for-bit.
    """
    labels = batch.labels
    if spec.threat_model == "bare":
        def fn(xa: Tensor) -> Tensor:
            return F.cross_entropy(model.forward(xa), labels)
    elif spec.threat_model == "prompt-aware-universal":
        if not isinstance(prompts, PromptTemplate):
            raise ValueError("prompt-aware-universal needs a PromptTemplate")
        fn = _universal_loss(model, labels, prompts.values.detach(), prompts.mask)
    else:
        if not isinstance(prompts, ClassPromptSet):
            raise ValueError("prompt-aware-classwise needs a ClassPromptSet")
        fn = _classwise_loss(model, labels, prompts)
    adv = _pgd_core(batch.images, fn, spec, generator)
    return LabeledImageBatch(adv, labels)


def pgd_attack_true_class(batch: LabeledImageBatch, model: ClassifierHandle,
                          spec: AttackSpec, prompts: ClassPromptSet,
                          generator: torch.Generator | None = None) -> LabeledImageBatch:
    """PGD against each sample's own-class prompted pipeline.

    This is the inner maximization of the class-wise training objectives,
    where the adversary sees x' + prompt(label). Evaluation-time attacks use
    the selection-based ``prompt-aware-classwise`` mode of ``pgd_attack``.
    """
    values = prompts.stacked_values().detach()[batch.labels]
    fn = _universal_loss(model, batch.labels, values, prompts.mask)
    adv = _pgd_core(batch.images, fn, spec, generator)
    return LabeledImageBatch(adv, batch.labels)
