"""Dataset ingestion and synthetic dataset generation.

Two on-disk formats are supported:

* CIFAR-10 binary batches: each record is 1 label byte followed by 3072
  pixel bytes (row-major R, G, B planes); pixels are scaled to [0, 1] by
  division by 255.
* Generic tensor directory: one raw little-endian float32 tensor file per
  split plus a newline-delimited label file. The image shape is not stored
  in the file and must be passed by the caller.

The synthetic generator produces dense low-amplitude class patterns on a
gray background with Gaussian pixel noise. The patterns are spread over the
whole image, which makes the clean task easy for a small CNN while leaving a
standardly trained model vulnerable to small L-inf perturbations.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch

from .core import DatasetSplit

__all__ = [
    "load_cifar10_batches",
    "load_tensor_dir",
    "save_tensor_dir",
    "synthetic_pattern_split",
    "dataset_root",
]

CIFAR_RECORD_BYTES = 1 + 3072
DATA_ROOT_ENV = "ADVPROMPT_DATA_ROOT"


def dataset_root(path: str | Path) -> Path:
    """Resolve a dataset path, honoring the ADVPROMPT_DATA_ROOT override."""
    path = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def load_cifar10_batches(paths: list[str | Path] | str | Path,
                         batch_size: int = 256) -> DatasetSplit:
    """Read one or more CIFAR-10 binary batch files into a split."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        raw = np.fromfile(dataset_root(p), dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
            raise ValueError(f"{p}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}")
        rec = raw.reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return DatasetSplit.from_tensors(
        torch.from_numpy(np.concatenate(images)),
        torch.from_numpy(np.concatenate(labels)),
        n_classes=10, batch_size=batch_size)


def load_tensor_dir(directory: str | Path, image_shape: tuple[int, int, int],
                    n_classes: int, batch_size: int = 256) -> DatasetSplit:
    """Read ``images.f32`` (raw LE float32) and ``labels.txt`` from a directory."""
    directory = dataset_root(directory)
    c, h, w = image_shape
    flat = np.fromfile(directory / "images.f32", dtype="<f4")
    labels = np.loadtxt(directory / "labels.txt", dtype=np.int64, ndmin=1)
    per = c * h * w
    if flat.size != labels.size * per:
        raise ValueError(
            f"{directory}: {flat.size} floats does not match {labels.size} labels x {per} pixels")
    images = torch.from_numpy(flat.reshape(-1, c, h, w).copy())
    return DatasetSplit.from_tensors(images, torch.from_numpy(labels),
                                     n_classes=n_classes, batch_size=batch_size)


def save_tensor_dir(split: DatasetSplit, directory: str | Path) -> None:
    """Write a split in the generic tensor-directory format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    split.images.numpy().astype("<f4").tofile(directory / "images.f32")
    np.savetxt(directory / "labels.txt", split.labels.numpy(), fmt="%d")


def synthetic_pattern_split(n_classes: int, n_per_class: int, image_size: int = 12,
                            channels: int = 3, amplitude: float = 0.05,
                            noise: float = 0.1, seed: int = 0,
                            template_seed: int | None = None,
                            batch_size: int = 256) -> DatasetSplit:
    """Class-template images: 0.5 + template[class] + N(0, noise), clipped to [0, 1].

    Templates are i.i.d. uniform in [-amplitude, amplitude] per pixel and
    depend only on ``template_seed`` (defaulting to ``seed``); sampling noise
    and ordering depend on ``seed``. Train/test splits of one task share the
    template seed and differ in the sample seed. Keeping the amplitude below
    roughly twice the attack radius guarantees that even the best linear
    decision rule can be flipped inside the L-inf ball, so standard training
    yields a model with near-zero robust accuracy, mirroring full-scale
    behavior.
    """
    template_rng = np.random.default_rng(seed if template_seed is None else template_seed)
    rng = np.random.default_rng(seed)
    shape = (channels, image_size, image_size)
    templates = template_rng.uniform(-amplitude, amplitude,
                                     size=(n_classes, *shape)).astype(np.float32)
    labels = np.repeat(np.arange(n_classes), n_per_class).astype(np.int64)
    noise_arr = rng.normal(0.0, noise, size=(labels.size, *shape)).astype(np.float32)
    images = np.clip(0.5 + templates[labels] + noise_arr, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return DatasetSplit.from_tensors(torch.from_numpy(images[order]),
                                     torch.from_numpy(labels[order]),
                                     n_classes=n_classes, batch_size=batch_size)
