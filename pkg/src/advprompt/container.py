"""Prompt container file format.

Layout: 8-byte magic ``VPROMPT1``, uint32 little-endian header length, UTF-8
JSON header, then the payload: one raw little-endian float32 tensor per
prompt, in class order. The header records the format version, the prompt
count (``n_classes``; 1 for a universal prompt), the tensor shape, the mask
width, the training mode, the full training-config snapshot, and final
metrics. Containers are written atomically (temp file + rename).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .core import ClassPromptSet, PromptTemplate, frame_mask
from .training import TrainConfig

__all__ = ["save_container", "load_container", "ContainerError"]

MAGIC = b"VPROMPT1"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Malformed prompt container."""


def save_container(path: str | Path, prompts: PromptTemplate | ClassPromptSet,
                   cfg: TrainConfig | None = None,
                   metrics: dict[str, Any] | None = None) -> None:
    if isinstance(prompts, PromptTemplate):
        tensors = [prompts.values]
        width = prompts.width
        mode = cfg.mode if cfg else "vanilla-vp"
    else:
        tensors = [p.values for p in prompts.prompts]
        width = prompts.width
        mode = cfg.mode if cfg else "c-avp"
    shape = list(tensors[0].shape)
    header = {
        "format_version": FORMAT_VERSION,
        "n_classes": len(tensors),
        "tensor_shape": shape,
        "mask_width": width,
        "mode": mode,
        "train_config": cfg.to_dict() if cfg else None,
        "final_metrics": metrics or {},
    }
    head = json.dumps(header).encode()
    blob = b"".join(t.detach().cpu().numpy().astype("<f4").tobytes() for t in tensors)
    payload = MAGIC + np.uint32(len(head)).tobytes() + head + blob

    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path: str | Path) -> tuple[PromptTemplate | ClassPromptSet, dict[str, Any]]:
    """Read a container; returns (prompts, header)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or not raw.startswith(MAGIC):
        raise ContainerError(f"{path}: bad magic or truncated header")
    off = len(MAGIC)
    head_len = int(np.frombuffer(raw[off:off + 4], dtype=np.uint32)[0])
    off += 4
    try:
        header = json.loads(raw[off:off + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header: {exc}") from exc
    off += head_len

    count = int(header["n_classes"])
    shape = tuple(header["tensor_shape"])
    width = int(header["mask_width"])
    per = int(np.prod(shape))
    if len(raw) - off != count * per * 4:
        raise ContainerError(
            f"{path}: payload is {len(raw) - off} bytes, header implies {count * per * 4}")
    mask = frame_mask(shape[1], shape[2], width)
    templates = []
    for _ in range(count):
        arr = np.frombuffer(raw[off:off + per * 4], dtype="<f4").reshape(shape)
        templates.append(PromptTemplate(torch.from_numpy(arr.copy()), mask, width))
        off += per * 4
    if count == 1 and header.get("mode") in ("vanilla-vp", "u-avp"):
        return templates[0], header
    if count == 1:
        return templates[0], header
    return ClassPromptSet(tuple(templates)), header
