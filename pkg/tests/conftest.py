from __future__ import annotations

import numpy as np
import pytest
import torch

from diffsearch.config import ModelConfig, RunConfig, SynthConfig, replace_section
from diffsearch.denoiser import DenoisingModel
from diffsearch.schedule import NoiseConfig, build_cosine_schedule
from diffsearch.synth import generate_synthetic


def micro_model_config(**overrides) -> ModelConfig:
    base = dict(channels=8, levels=2, stem_width=4, pool_size=3, num_heads=2,
                time_dim=8, n_train=4, n_test=4)
    base.update(overrides)
    return ModelConfig(**base)


def micro_noise_config(**overrides) -> NoiseConfig:
    base = dict(s1=2.0, s2=3.0, T=50, embed_dim=4)
    base.update(overrides)
    return NoiseConfig(**base)


def micro_model(seed: int = 0, model_overrides=None, noise_overrides=None) -> DenoisingModel:
    torch.manual_seed(seed)
    return DenoisingModel(micro_model_config(**(model_overrides or {})),
                          micro_noise_config(**(noise_overrides or {})))


@pytest.fixture(scope="session")
def micro_sched():
    return build_cosine_schedule(50)


@pytest.fixture(scope="session")
def tiny_dataset():
    """8-identity, 24-train/10-test synthetic set for fast integration tests."""
    spec = SynthConfig(n_identities=8, train_scenes=24, test_scenes=10,
                       scene_size=48, persons_min=1, persons_max=2,
                       person_height=(12, 22), seed=7)
    dataset, palette = generate_synthetic(spec)
    return dataset, palette, spec


def micro_run_config(**kw) -> RunConfig:
    """Training config small enough for CI smoke runs."""
    import dataclasses

    cfg = RunConfig()
    cfg = replace_section(
        cfg,
        diffusion=NoiseConfig(s1=2.0, s2=3.0, T=200, embed_dim=16),
        model=ModelConfig(channels=16, levels=2, stem_width=8, pool_size=3,
                          num_heads=2, time_dim=16, n_train=8, n_test=8),
    )
    cfg = replace_section(cfg, train=dataclasses.replace(
        cfg.train, iterations=30, batch_size=2, lr=1e-3, log_every=10))
    for key, value in kw.items():
        cfg = replace_section(cfg, **{key: value})
    return cfg


def random_boxes(n: int, rng: np.random.Generator) -> torch.Tensor:
    """Valid normalized corner boxes."""
    pts = rng.uniform(0, 1, size=(n, 2, 2))
    lo = pts.min(axis=1)
    hi = pts.max(axis=1)
    return torch.from_numpy(np.concatenate([lo, hi], axis=1))


def fd_gradient(fn, tensor: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar fn() w.r.t. every element of tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def rel_grad_error(auto: torch.Tensor, fd: torch.Tensor) -> float:
    denom = max(float(auto.norm()), float(fd.norm()), 1e-12)
    return float((auto - fd).norm()) / denom


def brute_force_assignment(cost: np.ndarray) -> float:
    """Exhaustive minimum over all injective row->column assignments."""
    from itertools import permutations

    m, n = cost.shape
    best = np.inf
    for cols in permutations(range(n), m):
        total = sum(cost[i, c] for i, c in enumerate(cols))
        best = min(best, total)
    return best
