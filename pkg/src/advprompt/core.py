"""Core domain types: image batches, dataset splits, visual prompts, and the
frozen classifier handle.

Images are float tensors in [0, 1] with layout [B, C, H, W]. A visual prompt
is an additive perturbation ``values`` supported on a binary border-frame
``mask``; applying it to an image means ``clamp(x + mask * values, 0, 1)``.
All operations here are pure functions over immutable inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterator, Sequence

import torch
from torch import Tensor, nn

__all__ = [
    "ShapeMismatchError",
    "LabeledImageBatch",
    "DatasetSplit",
    "PromptTemplate",
    "ClassPromptSet",
    "ClassifierHandle",
    "frame_mask",
    "full_mask_width",
    "prompt_images",
    "apply_prompt",
    "project_prompt",
    "split_by_class",
]


class ShapeMismatchError(ValueError):
    """Raised when tensor shapes or class counts of two artifacts disagree."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------------------
# Batches and splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledImageBatch:
    """A batch of images in [0, 1] with integer labels.

    images: float tensor [B, C, H, W], every pixel in [0, 1]
    labels: int64 tensor [B], non-negative
    """

    images: Tensor
    labels: Tensor

    def __post_init__(self) -> None:
        _check(self.images.dim() == 4, f"images must be [B,C,H,W], got {tuple(self.images.shape)}")
        _check(self.labels.dim() == 1, f"labels must be 1-D, got {tuple(self.labels.shape)}")
        _check(self.images.shape[0] == self.labels.shape[0],
               f"batch size mismatch: {self.images.shape[0]} images vs {self.labels.shape[0]} labels")
        _check(not self.labels.dtype.is_floating_point, "labels must be integer")
        _check(bool((self.images >= 0).all()) and bool((self.images <= 1).all()),
               "image pixels must lie in [0, 1]")
        _check(bool((self.labels >= 0).all()), "labels must be non-negative")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        c, h, w = self.images.shape[1:]
        return int(c), int(h), int(w)

    def to(self, dtype: torch.dtype) -> "LabeledImageBatch":
        return LabeledImageBatch(self.images.to(dtype), self.labels)


@dataclass(frozen=True)
class DatasetSplit:
    """An ordered collection of labeled batches with a fixed class count.

    The per-class view (``class_subset`` / ``split_by_class``) partitions the
    split: class subsets are disjoint and their union is the full split.
    """

    batches: tuple[LabeledImageBatch, ...]
    n_classes: int

    def __post_init__(self) -> None:
        _check(self.n_classes >= 1, "n_classes must be >= 1")
        for b in self.batches:
            _check(bool((b.labels < self.n_classes).all()),
                   f"labels must lie in [0, {self.n_classes - 1}]")

    def __len__(self) -> int:
        return sum(len(b) for b in self.batches)

    @cached_property
    def images(self) -> Tensor:
        return torch.cat([b.images for b in self.batches], dim=0)

    @cached_property
    def labels(self) -> Tensor:
        return torch.cat([b.labels for b in self.batches], dim=0)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.batches[0].image_shape

    @classmethod
    def from_tensors(cls, images: Tensor, labels: Tensor, n_classes: int,
                     batch_size: int = 256) -> "DatasetSplit":
        chunks = []
        for lo in range(0, images.shape[0], batch_size):
            chunks.append(LabeledImageBatch(images[lo:lo + batch_size],
                                            labels[lo:lo + batch_size]))
        return cls(tuple(chunks), n_classes)

    def class_indices(self, i: int) -> Tensor:
        if not 0 <= i < self.n_classes:
            raise IndexError(f"class index {i} out of range [0, {self.n_classes - 1}]")
        return torch.nonzero(self.labels == i, as_tuple=False).flatten()

    def class_subset(self, i: int) -> "DatasetSplit":
        idx = self.class_indices(i)
        return DatasetSplit.from_tensors(self.images[idx], self.labels[idx], self.n_classes)

    def subset(self, indices: Tensor) -> "DatasetSplit":
        return DatasetSplit.from_tensors(self.images[indices], self.labels[indices],
                                         self.n_classes)

    def iter_batches(self, batch_size: int,
                     generator: torch.Generator | None = None) -> Iterator[LabeledImageBatch]:
        """Yield mini-batches, shuffled when a generator is given."""
        n = len(self)
        if generator is None:
            order = torch.arange(n)
        else:
            order = torch.randperm(n, generator=generator)
        imgs, labs = self.images, self.labels
        for lo in range(0, n, batch_size):
            sel = order[lo:lo + batch_size]
            yield LabeledImageBatch(imgs[sel], labs[sel])

    def as_batch(self) -> LabeledImageBatch:
        return LabeledImageBatch(self.images, self.labels)


def split_by_class(split: DatasetSplit, i: int) -> tuple[DatasetSplit, DatasetSplit]:
    """Partition a split into (class-i samples, everything else)."""
    if not 0 <= i < split.n_classes:
        raise IndexError(f"class index {i} out of range [0, {split.n_classes - 1}]")
    mask = split.labels == i
    inside = torch.nonzero(mask, as_tuple=False).flatten()
    outside = torch.nonzero(~mask, as_tuple=False).flatten()
    return split.subset(inside), split.subset(outside)


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------

def frame_mask(height: int, width: int, frame_width: int,
               dtype: torch.dtype = torch.float32) -> Tensor:
    """Binary [H, W] mask: 1 on the border frame of the given width.

    mask[h, w] = 1 iff min(h, w, H-1-h, W-1-w) < frame_width. A frame width of
    at least ceil(min(H, W) / 2) covers the whole image.
    """
    hs = torch.arange(height).unsqueeze(1)
    ws = torch.arange(width).unsqueeze(0)
    dist = torch.minimum(torch.minimum(hs, height - 1 - hs),
                         torch.minimum(ws, width - 1 - ws))
    return (dist < frame_width).to(dtype)


def full_mask_width(height: int, width: int) -> int:
    """Smallest frame width whose mask covers every pixel."""
    return (min(height, width) + 1) // 2


@dataclass(frozen=True)
class PromptTemplate:
    """One additive visual prompt: values on a border frame, zero elsewhere.

    values: float tensor [C, H, W] in [-1, 1], exactly zero off-mask
    mask:   binary tensor [H, W], the border frame of ``width`` pixels
    """

    values: Tensor
    mask: Tensor
    width: int

    def __post_init__(self) -> None:
        _check(self.values.dim() == 3, f"values must be [C,H,W], got {tuple(self.values.shape)}")
        _check(self.mask.shape == self.values.shape[1:],
               f"mask shape {tuple(self.mask.shape)} != spatial shape {tuple(self.values.shape[1:])}")
        h, w = self.mask.shape
        expected = frame_mask(int(h), int(w), self.width, dtype=self.mask.dtype)
        _check(bool(torch.equal(self.mask, expected)),
               f"mask is not the border frame of width {self.width}")
        with torch.no_grad():
            vals = self.values.detach()
            _check(bool((vals.abs() <= 1).all()), "prompt values must lie in [-1, 1]")
            off = vals * (1 - self.mask)
            _check(bool((off == 0).all()), "prompt values must be exactly zero off-mask")

    @classmethod
    def zeros(cls, shape: tuple[int, int, int], width: int,
              dtype: torch.dtype = torch.float32) -> "PromptTemplate":
        c, h, w = shape
        return cls(torch.zeros(c, h, w, dtype=dtype), frame_mask(h, w, width, dtype=dtype), width)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        c, h, w = self.values.shape
        return int(c), int(h), int(w)


@dataclass(frozen=True)
class ClassPromptSet:
    """Ordered class-wise prompts; index i holds the prompt for class i."""

    prompts: tuple[PromptTemplate, ...]

    def __post_init__(self) -> None:
        _check(len(self.prompts) >= 1, "ClassPromptSet needs at least one prompt")
        first = self.prompts[0]
        for p in self.prompts[1:]:
            _check(p.values.shape == first.values.shape, "all prompts must share one shape")
            _check(p.width == first.width, "all prompts must share one frame width")
            _check(bool(torch.equal(p.mask, first.mask)), "all prompts must share one mask")

    def __len__(self) -> int:
        return len(self.prompts)

    def __getitem__(self, i: int) -> PromptTemplate:
        return self.prompts[i]

    @property
    def mask(self) -> Tensor:
        return self.prompts[0].mask

    @property
    def width(self) -> int:
        return self.prompts[0].width

    def stacked_values(self) -> Tensor:
        """[N, C, H, W] stack; keeps autograd links to the member tensors."""
        return torch.stack([p.values for p in self.prompts], dim=0)

    @classmethod
    def zeros(cls, n_classes: int, shape: tuple[int, int, int], width: int,
              dtype: torch.dtype = torch.float32) -> "ClassPromptSet":
        return cls(tuple(PromptTemplate.zeros(shape, width, dtype) for _ in range(n_classes)))


def prompt_images(images: Tensor, values: Tensor, mask: Tensor) -> Tensor:
    """clamp(images + mask * values, 0, 1); broadcasts values over the batch.

    This is the differentiable primitive shared by prompt application, the
    prompt-aware attacks, and the training objectives. The clamp participates
    in the graph, so gradients are zero wherever it saturates.
    """
    return torch.clamp(images + values * mask, 0.0, 1.0)


def apply_prompt(batch: LabeledImageBatch, prompt: PromptTemplate) -> LabeledImageBatch:
    """Add a prompt to every image of a batch; labels pass through."""
    if batch.images.shape[1:] != prompt.values.shape:
        raise ShapeMismatchError(
            f"batch images {tuple(batch.images.shape[1:])} vs prompt {tuple(prompt.values.shape)}")
    return LabeledImageBatch(prompt_images(batch.images, prompt.values, prompt.mask),
                             batch.labels)


def project_prompt(prompt: PromptTemplate) -> PromptTemplate:
    """Project onto the constraint set: clip values to [-1, 1], zero off-mask."""
    with torch.no_grad():
        vals = torch.clamp(prompt.values.detach(), -1.0, 1.0) * prompt.mask
    return PromptTemplate(vals, prompt.mask, prompt.width)


# ---------------------------------------------------------------------------
# Frozen classifier handle
# ---------------------------------------------------------------------------

class ClassifierHandle:
    """A frozen, deterministic map from images [B,C,H,W] to scores [B,N].

    Wraps either an ``nn.Module`` (eval mode, parameters frozen) or a plain
    callable (scripted models in tests). ``confidence_mode`` selects what
    ``confidences`` returns: the raw scores or their softmax. Forward-call and
    row counters support inference-overhead accounting.
    """

    RAW = "raw-score"
    PROB = "normalized-probability"

    def __init__(self, fn: nn.Module | Callable[[Tensor], Tensor], n_classes: int,
                 confidence_mode: str = RAW, name: str = "classifier",
                 input_shape: tuple[int, int, int] | None = None,
                 clean_accuracy: float | None = None, seed: int | None = None):
        if confidence_mode not in (self.RAW, self.PROB):
            raise ValueError(f"unknown confidence_mode {confidence_mode!r}")
        if isinstance(fn, nn.Module):
            fn.eval()
            for p in fn.parameters():
                p.requires_grad_(False)
        self._fn = fn
        self.n_classes = int(n_classes)
        self.confidence_mode = confidence_mode
        self.name = name
        self.input_shape = input_shape
        self.clean_accuracy = clean_accuracy
        self.seed = seed
        self.n_forward_calls = 0
        self.n_forward_rows = 0

    @property
    def module(self) -> nn.Module | None:
        return self._fn if isinstance(self._fn, nn.Module) else None

    def forward(self, images: Tensor) -> Tensor:
        """Raw class scores [B, N]; differentiable w.r.t. the input."""
        self.n_forward_calls += 1
        self.n_forward_rows += int(images.shape[0])
        out = self._fn(images)
        if out.shape[-1] != self.n_classes:
            raise ShapeMismatchError(
                f"model emitted {out.shape[-1]} scores, expected {self.n_classes}")
        return out

    __call__ = forward

    def confidences(self, images: Tensor) -> Tensor:
        """Per-class confidences under the configured mode."""
        scores = self.forward(images)
        if self.confidence_mode == self.PROB:
            return torch.softmax(scores, dim=-1)
        return scores

    def predict(self, images: Tensor) -> Tensor:
        with torch.no_grad():
            return argmax_smallest(self.forward(images))

    def reset_counters(self) -> None:
        self.n_forward_calls = 0
        self.n_forward_rows = 0

    def parameter_checksum(self) -> str:
        """SHA-256 over all parameters and buffers; constant for a frozen model."""
        h = hashlib.sha256()
        if self.module is not None:
            for key, tensor in sorted(self.module.state_dict().items()):
                h.update(key.encode())
                h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def argmax_smallest(scores: Tensor) -> Tensor:
    """Row-wise argmax with ties broken toward the smallest index."""
    n = scores.shape[-1]
    best = scores.max(dim=-1, keepdim=True).values
    idx = torch.arange(n, device=scores.device).expand_as(scores)
    return torch.where(scores == best, idx, n).min(dim=-1).values
