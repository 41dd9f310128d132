"""Test-time class-wise prompt selection and prompted prediction.

The selection rule scores each candidate class i by the model's class-i
confidence on the input prompted with that class's own prompt, and picks the
best one; the selected index doubles as the prediction. All N prompted
forwards are batched into a single widened model call of B*N rows, which is
what keeps the inference overhead of the class-wise defense small.
"""

from __future__ import annotations

import torch
from torch import Tensor

from .core import (ClassifierHandle, ClassPromptSet, LabeledImageBatch,
                   PromptTemplate, ShapeMismatchError, apply_prompt,
                   argmax_smallest, prompt_images)

__all__ = [
    "stacked_prompted_confidences",
    "select_prompt",
    "prompted_predict",
    "prompted_predict_universal",
]


def stacked_prompted_confidences(images: Tensor, prompts: ClassPromptSet,
                                 model: ClassifierHandle) -> Tensor:
    """[N, B, K] confidences: entry (i, b, k) is f_k(x_b + prompt_i).

    One widened forward of N*B rows; logically N model evaluations per batch.
    """
    n = len(prompts)
    if n != model.n_classes:
        raise ShapeMismatchError(f"{n} prompts vs model with {model.n_classes} classes")
    values = prompts.stacked_values()
    stacked = prompt_images(images.unsqueeze(0), values.unsqueeze(1), prompts.mask)
    conf = model.confidences(stacked.reshape(n * images.shape[0], *images.shape[1:]))
    return conf.reshape(n, images.shape[0], model.n_classes)


def select_prompt(batch: LabeledImageBatch, prompts: ClassPromptSet,
                  model: ClassifierHandle) -> tuple[Tensor, Tensor]:
    """Pick the class whose own prompt maximizes its own confidence.

    Returns (indices [B], matrix [B, N]) where matrix[b, i] is the class-i
    confidence of sample b prompted with prompt i. Ties break toward the
    smallest class index.
    """
    with torch.no_grad():
        conf = stacked_prompted_confidences(batch.images, prompts, model)
        matrix = conf.permute(1, 0, 2).diagonal(dim1=1, dim2=2)
        return argmax_smallest(matrix), matrix


def prompted_predict(batch: LabeledImageBatch, prompts: ClassPromptSet,
                     model: ClassifierHandle) -> Tensor:
    """Class-wise prompted prediction: the selected index is the label."""
    return select_prompt(batch, prompts, model)[0]


def prompted_predict_universal(batch: LabeledImageBatch, prompt: PromptTemplate,
                               model: ClassifierHandle) -> Tensor:
    """Argmax prediction on the universally prompted batch."""
    with torch.no_grad():
        conf = model.confidences(apply_prompt(batch, prompt).images)
        return argmax_smallest(conf)
