"""Versioned parameter-map checkpoints.

A checkpoint is a torch-serialized dict: format tag, version, the config
needed to rebuild the module, its state dict, and optional extras
(optimizer state, step counter). Loading validates shapes before touching
the target module, so a failed load never leaves a partial install.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch
from torch import nn

from .errors import CheckpointError

FORMAT_TAG = "geopixseg-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    config: dict[str, Any],
    state_dict: dict[str, torch.Tensor],
    extra: dict[str, Any] | None = None,
) -> None:
    payload = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "config": config,
        "state_dict": {k: v.detach().cpu() for k, v in state_dict.items()},
        "extra": extra or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} does not deserialize: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path} is not a {FORMAT_TAG} file")
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has version {payload.get('version')}, expected {FORMAT_VERSION}"
        )
    return payload


def install_state(module: nn.Module, state_dict: dict[str, torch.Tensor]) -> None:
    """Install weights after validating every name and shape; on any
    mismatch the module is left untouched and the first offender is named."""
    own = module.state_dict()
    missing = [k for k in own if k not in state_dict]
    unexpected = [k for k in state_dict if k not in own]
    if missing or unexpected:
        raise CheckpointError(
            f"state dict keys do not match: missing={missing[:4]} unexpected={unexpected[:4]}"
        )
    for name in own:
        if tuple(own[name].shape) != tuple(state_dict[name].shape):
            raise CheckpointError(
                f"parameter {name!r} has shape {tuple(state_dict[name].shape)} in checkpoint, "
                f"expected {tuple(own[name].shape)}"
            )
    module.load_state_dict(state_dict)
