"""Experiment configuration files: flat INI (key = value under sections).

Every training hyperparameter has a named key whose default reproduces the
reference setup: lambda = 1, tau = 0.1, gamma = 3, epsilon = 8/255, 10 attack
steps, cosine learning rate from 0.1, prompt width 8. Only ``train.mode`` is
required. ``prompt_width = -1`` selects a full-image mask.

Sections: [data] (synthetic | cifar10 | tensor-dir), [model], [train],
[loss], [attack], [output].
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .attack import THREAT_MODELS, AttackSpec
from .core import DatasetSplit
from .data import (dataset_root, load_cifar10_batches, load_tensor_dir,
                   synthetic_pattern_split)
from .objectives import REGULARIZERS, LossConfig
from .training import MODES, TrainConfig
from .zoo import ARCHITECTURES, ClassifierHandle, ModelSpec, load_checkpoint, \
    train_base_classifier

__all__ = ["ConfigError", "DataConfig", "ModelConfig", "ExperimentConfig",
           "parse_experiment_config", "load_data_section"]

DATA_KINDS = ("synthetic", "cifar10", "tensor-dir")


class ConfigError(ValueError):
    """Invalid or missing configuration field; carries the field name."""

    def __init__(self, fieldname: str, message: str):
        super().__init__(f"{fieldname}: {message}")
        self.fieldname = fieldname


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"
    path: str = ""
    n_classes: int = 4
    image_size: int = 12
    channels: int = 3
    n_per_class_train: int = 200
    n_per_class_test: int = 100
    amplitude: float = 0.05
    noise: float = 0.1
    seed: int = 0
    image_shape: tuple[int, int, int] | None = None
    batch_size: int = 256

    def build(self) -> tuple[DatasetSplit, DatasetSplit]:
        """Return (train split, test split)."""
        if self.kind == "synthetic":
            train = synthetic_pattern_split(self.n_classes, self.n_per_class_train,
                                            self.image_size, self.channels,
                                            self.amplitude, self.noise, seed=self.seed,
                                            template_seed=self.seed,
                                            batch_size=self.batch_size)
            test = synthetic_pattern_split(self.n_classes, self.n_per_class_test,
                                           self.image_size, self.channels,
                                           self.amplitude, self.noise,
                                           seed=self.seed + 1, template_seed=self.seed,
                                           batch_size=self.batch_size)
            return train, test
        if self.kind == "cifar10":
            root = dataset_root(self.path)
            train_files = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
            missing = [str(p) for p in train_files if not p.exists()]
            if missing:
                raise FileNotFoundError(f"missing CIFAR-10 batches: {missing}")
            train = load_cifar10_batches(train_files, batch_size=self.batch_size)
            test = load_cifar10_batches(root / "test_batch.bin",
                                        batch_size=self.batch_size)
            return train, test
        if self.image_shape is None:
            raise ConfigError("data.image_shape", "required for tensor-dir datasets")
        root = dataset_root(self.path)
        train = load_tensor_dir(root / "train", self.image_shape, self.n_classes,
                                batch_size=self.batch_size)
        test = load_tensor_dir(root / "test", self.image_shape, self.n_classes,
                               batch_size=self.batch_size)
        return train, test


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "tiny-cnn"
    checkpoint: str = ""
    train_epochs: int = 6
    train_lr: float = 1e-3
    train_seed: int = 0
    confidence_mode: str = "raw-score"

    def build(self, train_data: DatasetSplit, test_data: DatasetSplit,
              verbose: bool = False) -> ClassifierHandle:
        if self.checkpoint:
            handle = load_checkpoint(dataset_root(self.checkpoint))
            handle.confidence_mode = self.confidence_mode
            return handle
        c, h, w = train_data.image_shape
        spec = ModelSpec(self.architecture, train_data.n_classes, (c, h, w))
        handle = train_base_classifier(train_data, spec, epochs=self.train_epochs,
                                       seed=self.train_seed, lr=self.train_lr,
                                       test_data=test_data, verbose=verbose)
        handle.confidence_mode = self.confidence_mode
        return handle


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    output_dir: Path = field(default_factory=lambda: Path("runs/latest"))


def _get(parser: configparser.ConfigParser, section: str, key: str, cast,
         default):
    if not parser.has_option(section, key) or parser.get(section, key).strip() == "":
        return default
    raw = parser.get(section, key).strip()
    try:
        if cast is bool:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}", str(exc)) from exc


def _choice(value: str, allowed, fieldname: str) -> str:
    if value not in allowed:
        raise ConfigError(fieldname, f"must be one of {tuple(allowed)}, got {value!r}")
    return value


def load_data_section(parser: configparser.ConfigParser) -> DataConfig:
    kind = _choice(_get(parser, "data", "kind", str, "synthetic"), DATA_KINDS, "data.kind")
    shape_raw = _get(parser, "data", "image_shape", str, "")
    image_shape = None
    if shape_raw:
        parts = [p for p in shape_raw.replace(",", " ").split() if p]
        if len(parts) != 3:
            raise ConfigError("data.image_shape", f"expected C,H,W, got {shape_raw!r}")
        image_shape = tuple(int(p) for p in parts)
    return DataConfig(
        kind=kind,
        path=_get(parser, "data", "path", str, ""),
        n_classes=_get(parser, "data", "n_classes", int, 4),
        image_size=_get(parser, "data", "image_size", int, 12),
        channels=_get(parser, "data", "channels", int, 3),
        n_per_class_train=_get(parser, "data", "n_per_class_train", int, 200),
        n_per_class_test=_get(parser, "data", "n_per_class_test", int, 100),
        amplitude=_get(parser, "data", "amplitude", float, 0.05),
        noise=_get(parser, "data", "noise", float, 0.1),
        seed=_get(parser, "data", "seed", int, 0),
        image_shape=image_shape,
        batch_size=_get(parser, "data", "batch_size", int, 256),
    )


def parse_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"no such file: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError("config", f"parse error: {exc}") from exc

    data = load_data_section(parser)

    model = ModelConfig(
        architecture=_choice(_get(parser, "model", "architecture", str, "tiny-cnn"),
                             ARCHITECTURES, "model.architecture"),
        checkpoint=_get(parser, "model", "checkpoint", str, ""),
        train_epochs=_get(parser, "model", "train_epochs", int, 6),
        train_lr=_get(parser, "model", "train_lr", float, 1e-3),
        train_seed=_get(parser, "model", "train_seed", int, 0),
        confidence_mode=_choice(_get(parser, "model", "confidence_mode", str, "raw-score"),
                                ("raw-score", "normalized-probability"),
                                "model.confidence_mode"),
    )

    mode = _get(parser, "train", "mode", str, None)
    if mode is None:
        raise ConfigError("train.mode", "required field is missing")
    mode = _choice(mode, MODES, "train.mode")

    regs_raw = _get(parser, "loss", "enabled_regularizers", str, "l1,l2,l3")
    enabled = frozenset(p.strip() for p in regs_raw.split(",") if p.strip())
    if not enabled <= set(REGULARIZERS):
        raise ConfigError("loss.enabled_regularizers",
                          f"must be a subset of {REGULARIZERS}, got {regs_raw!r}")
    try:
        loss = LossConfig(
            lambda_=_get(parser, "loss", "lambda", float, 1.0),
            gamma=_get(parser, "loss", "gamma", float, 3.0),
            tau=_get(parser, "loss", "tau", float, 0.1),
            enabled_regularizers=enabled,
        )
    except ValueError as exc:
        raise ConfigError("loss", str(exc)) from exc

    threat = _choice(_get(parser, "attack", "threat_model", str, "prompt-aware-universal"),
                     THREAT_MODELS, "attack.threat_model")
    try:
        attack = AttackSpec(
            epsilon=_get(parser, "attack", "epsilon", float, 8 / 255),
            steps=_get(parser, "attack", "steps", int, 10),
            step_size=_get(parser, "attack", "step_size", float, None),
            random_init=_get(parser, "attack", "random_init", bool, True),
            threat_model=threat,
        )
    except ValueError as exc:
        raise ConfigError("attack", str(exc)) from exc

    try:
        train = TrainConfig(
            mode=mode, loss=loss, attack=attack,
            epochs=_get(parser, "train", "epochs", int, 20),
            batch_size=_get(parser, "train", "batch_size", int, 128),
            lr_initial=_get(parser, "train", "lr_initial", float, 0.1),
            lr_schedule=_get(parser, "train", "lr_schedule", str, "cosine-to-zero"),
            prompt_width=_get(parser, "train", "prompt_width", int, 8),
            seed=_get(parser, "train", "seed", int, 0),
            probe_fraction=_get(parser, "train", "probe_fraction", float, 0.1),
            probe_max=_get(parser, "train", "probe_max", int, 256),
        )
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from exc

    out = Path(_get(parser, "output", "dir", str, "runs/latest"))
    return ExperimentConfig(data=data, model=model, train=train, output_dir=out)
