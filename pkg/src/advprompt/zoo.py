"""Frozen base classifiers: desk-scale CNN training and checkpoint I/O.

The checkpoint container is a single file: an 8-byte magic, a uint32
little-endian header length, a UTF-8 JSON manifest, then the raw parameter
payload. The manifest's ``parameter_index`` lists every state entry (name,
shape, dtype) in payload order; payload values are little-endian float32
regardless of the in-memory dtype, cast back on load. The manifest also
records architecture, shapes, seed, and the measured clean accuracy so a
loaded model can be re-verified.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import ClassifierHandle, DatasetSplit

__all__ = [
    "ModelSpec",
    "TinyCNN",
    "ResNet18",
    "build_model",
    "train_base_classifier",
    "clean_accuracy",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CheckpointCorruptError",
    "CheckpointShapeError",
    "CheckpointManifestError",
]

CHECKPOINT_MAGIC = b"VPCKPT01"
ARCHITECTURES = ("tiny-cnn", "resnet18")


class CheckpointError(Exception):
    """Base class for checkpoint container failures."""


class CheckpointCorruptError(CheckpointError):
    """File is truncated, has a bad magic, or an unreadable manifest."""


class CheckpointShapeError(CheckpointError):
    """Manifest shapes disagree with the architecture or payload size."""


class CheckpointManifestError(CheckpointError):
    """Recorded metrics do not match a re-verification."""


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "tiny-cnn"
    n_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    checkpoint: str | None = None

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")


class TinyCNN(nn.Module):
    """Three conv blocks with pooling and a position-aware flatten head.

    Roughly 30k-120k parameters depending on width and input size; sized so
    the full desk-scale protocol runs in minutes on a laptop CPU. The head
    stays position-aware (flatten, not pooled) because prompt patterns and
    the synthetic class templates are position-coded.
    """

    def __init__(self, n_classes: int, in_channels: int = 3, width: int = 16,
                 input_size: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 4 * width, 3, padding=1)
        spatial = (input_size // 2) // 2
        self.head = nn.Linear(4 * width * spatial * spatial, n_classes)

    def forward(self, x: Tensor) -> Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.conv3(x))
        return self.head(x.flatten(1))


class BasicBlock(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes))

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """CIFAR-style ResNet-18: 3x3 stem, no initial max-pool."""

    def __init__(self, n_classes: int = 10, in_channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 64, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.layer1 = self._stage(64, 64, 2, 1)
        self.layer2 = self._stage(64, 128, 2, 2)
        self.layer3 = self._stage(128, 256, 2, 2)
        self.layer4 = self._stage(256, 512, 2, 2)
        self.head = nn.Linear(512, n_classes)

    @staticmethod
    def _stage(in_planes: int, planes: int, blocks: int, stride: int) -> nn.Sequential:
        layers = [BasicBlock(in_planes, planes, stride)]
        layers += [BasicBlock(planes, planes, 1) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        out = out.mean(dim=(2, 3))
        return self.head(out)


def build_model(spec: ModelSpec) -> nn.Module:
    if spec.architecture == "tiny-cnn":
        return TinyCNN(spec.n_classes, in_channels=spec.input_shape[0],
                       input_size=spec.input_shape[1])
    return ResNet18(spec.n_classes, in_channels=spec.input_shape[0])


def clean_accuracy(module_or_handle, data: DatasetSplit) -> float:
    """Top-1 accuracy over a split, in [0, 1]."""
    fwd = module_or_handle.forward if isinstance(module_or_handle, ClassifierHandle) \
        else module_or_handle
    correct = 0
    with torch.no_grad():
        for b in data.batches:
            correct += int((fwd(b.images).argmax(dim=1) == b.labels).sum())
    return correct / len(data)


def train_base_classifier(data: DatasetSplit, spec: ModelSpec, epochs: int = 5,
                          seed: int = 0, lr: float = 1e-3, batch_size: int = 128,
                          test_data: DatasetSplit | None = None,
                          verbose: bool = False) -> ClassifierHandle:
    """Standard (non-adversarial) training, then freeze.

    Deterministic for a given seed: weight init and batch order are driven by
    a forked RNG, so training twice yields identical parameters.
    """
    if len(data) == 0:
        raise ValueError("empty training split")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = build_model(spec)
        gen = torch.Generator().manual_seed(seed + 1)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        model.train()
        for epoch in range(epochs):
            total, count = 0.0, 0
            for batch in data.iter_batches(batch_size, generator=gen):
                opt.zero_grad()
                loss = F.cross_entropy(model(batch.images), batch.labels)
                if not torch.isfinite(loss):
                    raise RuntimeError(f"non-finite loss in epoch {epoch}")
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(batch)
                count += len(batch)
            if verbose:
                print(f"[base] epoch {epoch + 1}/{epochs} loss {total / count:.4f}")
    model.eval()
    acc = clean_accuracy(model, test_data if test_data is not None else data)
    return ClassifierHandle(model, spec.n_classes, input_shape=spec.input_shape,
                            clean_accuracy=acc, seed=seed, name=spec.architecture)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(handle: ClassifierHandle, path: str | Path) -> None:
    """Write the frozen model to the checkpoint container format."""
    module = handle.module
    if module is None:
        raise ValueError("only nn.Module-backed handles can be checkpointed")
    state = module.state_dict()
    index = [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype).removeprefix("torch.")}
             for k, v in state.items()]
    arch = "tiny-cnn" if isinstance(module, TinyCNN) else \
        "resnet18" if isinstance(module, ResNet18) else handle.name
    header = {
        "format_version": 1,
        "architecture": arch,
        "n_classes": handle.n_classes,
        "input_shape": list(handle.input_shape) if handle.input_shape else None,
        "confidence_mode": handle.confidence_mode,
        "clean_accuracy": handle.clean_accuracy,
        "seed": handle.seed,
        "parameter_index": index,
    }
    blob = b"".join(v.detach().cpu().numpy().astype("<f4").tobytes()
                    for v in state.values())
    head = json.dumps(header).encode()
    payload = CHECKPOINT_MAGIC + np.uint32(len(head)).tobytes() + head + blob
    _atomic_write(Path(path), payload)


def load_checkpoint(path: str | Path, verify_data: DatasetSplit | None = None,
                    accuracy_tolerance: float = 1e-3) -> ClassifierHandle:
    """Read a checkpoint container and return a frozen handle.

    When ``verify_data`` is given, the recorded clean accuracy is recomputed
    and must match the manifest within ``accuracy_tolerance`` (0.1 percentage
    points by default).
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointCorruptError(f"{path}: bad magic or truncated header")
    off = len(CHECKPOINT_MAGIC)
    head_len = int(np.frombuffer(raw[off:off + 4], dtype=np.uint32)[0])
    off += 4
    if len(raw) < off + head_len:
        raise CheckpointCorruptError(f"{path}: truncated manifest")
    try:
        header = json.loads(raw[off:off + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable manifest: {exc}") from exc
    off += head_len

    arch = header.get("architecture")
    if arch not in ARCHITECTURES:
        raise CheckpointShapeError(f"{path}: unknown architecture {arch!r}")
    input_shape = tuple(header["input_shape"]) if header.get("input_shape") else (3, 32, 32)
    spec = ModelSpec(arch, int(header["n_classes"]), input_shape)
    module = build_model(spec)
    state = module.state_dict()

    index = header.get("parameter_index", [])
    names = [e["name"] for e in index]
    if names != list(state.keys()):
        raise CheckpointShapeError(f"{path}: parameter index does not match {arch}")
    expected = sum(int(np.prod(e["shape"])) for e in index) * 4
    if len(raw) - off != expected:
        raise CheckpointCorruptError(
            f"{path}: payload is {len(raw) - off} bytes, manifest implies {expected}")

    for entry in index:
        target = state[entry["name"]]
        if list(target.shape) != entry["shape"]:
            raise CheckpointShapeError(
                f"{path}: {entry['name']} has shape {entry['shape']}, "
                f"architecture wants {list(target.shape)}")
        n_bytes = int(np.prod(entry["shape"])) * 4
        arr = np.frombuffer(raw[off:off + n_bytes], dtype="<f4").reshape(entry["shape"])
        target.copy_(torch.from_numpy(arr.copy()).to(target.dtype))
        off += n_bytes

    handle = ClassifierHandle(module, spec.n_classes,
                              confidence_mode=header.get("confidence_mode",
                                                         ClassifierHandle.RAW),
                              input_shape=input_shape,
                              clean_accuracy=header.get("clean_accuracy"),
                              seed=header.get("seed"), name=arch)
    if verify_data is not None and header.get("clean_accuracy") is not None:
        measured = clean_accuracy(handle, verify_data)
        if abs(measured - header["clean_accuracy"]) > accuracy_tolerance:
            raise CheckpointManifestError(
                f"{path}: clean accuracy {measured:.4f} differs from recorded "
                f"{header['clean_accuracy']:.4f} by more than {accuracy_tolerance}")
    return handle
