"""Checkpoint format: flat named parameter tensors plus a JSON header.

The header records parameter shapes, the config, its hash, and the
schedule parameters; the tensor payload round-trips bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

from .config import ModelConfig, RunConfig, config_from_dict, config_hash, config_to_dict
from .denoiser import DenoisingModel
from .schedule import NoiseConfig


def save_checkpoint(path: Path, model: DenoisingModel, cfg: RunConfig,
                    extras: dict | None = None) -> None:
    params = model.state_dict()
    header = {
        "format_version": 1,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "schedule": {"T": cfg.diffusion.T, "s1": cfg.diffusion.s1,
                     "s2": cfg.diffusion.s2, "embed_dim": cfg.diffusion.embed_dim},
        "param_shapes": {name: list(t.shape) for name, t in params.items()},
    }
    payload = {"header_json": json.dumps(header, sort_keys=True), "params": params}
    payload.update(extras or {})
    torch.save(payload, path)


def load_checkpoint(path: Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    payload["header"] = json.loads(payload["header_json"])
    return payload


def model_from_checkpoint(path: Path) -> tuple[DenoisingModel, RunConfig, dict]:
    """Rebuild the model exactly as configured at save time."""
    payload = load_checkpoint(path)
    cfg = config_from_dict(payload["header"]["config"])
    model = DenoisingModel(
        ModelConfig(**{**cfg.model.__dict__}),
        NoiseConfig(**{**cfg.diffusion.__dict__}),
    )
    model.load_state_dict(payload["params"])
    model.eval()
    return model, cfg, payload
