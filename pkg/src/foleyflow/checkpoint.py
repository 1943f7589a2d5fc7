"""Checkpoint files: a plain-text header followed by named tensors.

::

    foleyflow-checkpoint 1
    [model]
    model_dim = 64
    ...
    [meta]
    step = 2000
    [tensors]
    name: params.audio_in.weight
    dims: 64 64
    <little-endian float64 payload>
    ...
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .model import ModelConfig
from .numerics import read_tensor, write_tensor

MAGIC = "foleyflow-checkpoint 1"


def save_checkpoint(path, model_cfg: ModelConfig, tensors: dict[str, torch.Tensor | np.ndarray],
                    meta: dict | None = None) -> None:
    lines = [MAGIC, "[model]"]
    lines += [f"{k} = {v}" for k, v in model_cfg.to_dict().items()]
    lines.append("[meta]")
    lines += [f"{k} = {v}" for k, v in sorted((meta or {}).items())]
    lines.append("[tensors]")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for name, tensor in tensors.items():
            fh.write(f"name: {name}\n".encode("utf-8"))
            write_tensor(fh, tensor)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    model_kv: dict[str, str] = {}
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.readline().decode("utf-8").strip() != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        section = None
        while True:
            line = fh.readline().decode("utf-8")
            if not line:
                raise CheckpointError(f"{path}: missing [tensors] section")
            line = line.strip()
            if line == "[tensors]":
                break
            if line.startswith("["):
                section = line
                continue
            key, _, value = line.partition(" = ")
            (model_kv if section == "[model]" else meta)[key] = value
        while True:
            line = fh.readline().decode("utf-8")
            if not line:
                break
            if not line.startswith("name: "):
                raise CheckpointError(f"{path}: malformed tensor record {line!r}")
            tensors[line[6:].strip()] = read_tensor(fh)
    return ModelConfig.from_dict(model_kv), tensors, meta


def group(tensors: dict, prefix: str) -> dict:
    """Sub-dictionary of ``tensors`` whose names start with ``prefix + '.'``."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def load_state(module: torch.nn.Module, state: dict[str, np.ndarray]) -> None:
    own = dict(module.named_parameters())
    if set(own) != set(state):
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        raise CheckpointError(f"parameter mismatch: missing={missing[:3]} unexpected={extra[:3]}")
    with torch.no_grad():
        for name, p in own.items():
            value = torch.as_tensor(state[name], dtype=p.dtype)
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: shape {tuple(value.shape)} != {tuple(p.shape)}")
            p.copy_(value)
