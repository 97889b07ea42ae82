"""Cosine noise schedule and the dual forward noising process.

The same cumulative retention factor ``alpha_bar[t]`` drives both the box
channel and the embedding channel, so a single timestep corrupts the two
signals consistently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError

BETA_MAX = 0.999


@dataclass(frozen=True)
class ScheduleTable:
    """Precomputed diffusion schedule; immutable and shareable across workers.

    ``alpha_bar`` has T+1 entries indexed by timestep 0..T, with
    ``alpha_bar[0] == 1`` and strictly decreasing values.
    """

    T: int
    alpha_bar: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray

    def sqrt_alpha_bar(self, t) -> float:
        return math.sqrt(float(self.alpha_bar[t]))

    def sqrt_one_minus_alpha_bar(self, t) -> float:
        return math.sqrt(1.0 - float(self.alpha_bar[t]))


@dataclass(frozen=True)
class NoiseConfig:
    """Signal scaling for the two diffusion channels."""

    s1: float = 2.0
    s2: float = 3.0
    T: int = 1000
    embed_dim: int = 256

    def __post_init__(self):
        if self.s1 <= 0 or self.s2 <= 0:
            raise ConfigError(f"signal scales must be positive, got s1={self.s1}, s2={self.s2}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")


@dataclass
class DiffusionState:
    """Per-image set of noisy (box, embedding) pairs at one timestep.

    boxes: (N, 4) signal-space values; embeds: (N, D); t in [0, T].
    """

    boxes: torch.Tensor
    embeds: torch.Tensor
    t: int
    N: int = field(init=False)

    def __post_init__(self):
        if self.boxes.shape[0] != self.embeds.shape[0]:
            raise ValueError("boxes and embeds must agree on the set size N")
        self.N = int(self.boxes.shape[0])


def build_cosine_schedule(T: int) -> ScheduleTable:
    """Monotonically decreasing cosine schedule.

    alpha_bar(t) = f(t)/f(0) with f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2),
    s = 0.008; per-step betas are clipped at 0.999 and alpha_bar is then
    rebuilt as the cumulative product so the table stays consistent.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    s = 0.008
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    raw = f / f[0]
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, BETA_MAX)
    alphas = 1.0 - betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
    return ScheduleTable(T=T, alpha_bar=alpha_bar, alphas=alphas, betas=betas)


def duplicate_ground_truth(gts: list, n_train: int) -> list:
    """Uniformly duplicate ground-truth entries until exactly n_train remain.

    Each of the M originals is repeated floor(N/M) or ceil(N/M) times; the
    remainder goes to the first (N mod M) entries in input order, so the
    result is deterministic.
    """
    m = len(gts)
    if m == 0:
        raise ValueError("duplicate_ground_truth requires at least one ground truth; "
                         "empty images take an all-background target upstream")
    if m > n_train:
        raise ValueError(f"more ground truths ({m}) than slots ({n_train})")
    base = n_train // m
    rem = n_train % m
    out = []
    for i, gt in enumerate(gts):
        out.extend([gt] * (base + (1 if i < rem else 0)))
    return out


def add_noise(
    b0_signal: torch.Tensor,
    e0_norm: torch.Tensor,
    t: int,
    sched: ScheduleTable,
    rng: torch.Generator,
) -> DiffusionState:
    """Dual forward noising: x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps.

    Expects boxes already in signal space (scaled by s1) and embeddings
    already normalized and scaled by s2. The same timestep corrupts both
    channels.
    """
    if not (1 <= t <= sched.T):
        raise ValueError(f"t must lie in [1, {sched.T}], got {t}")
    sa = sched.sqrt_alpha_bar(t)
    sn = sched.sqrt_one_minus_alpha_bar(t)
    eps1 = torch.randn(b0_signal.shape, generator=rng, dtype=b0_signal.dtype)
    eps2 = torch.randn(e0_norm.shape, generator=rng, dtype=e0_norm.dtype)
    return DiffusionState(
        boxes=sa * b0_signal + sn * eps1,
        embeds=sa * e0_norm + sn * eps2,
        t=t,
    )


def pure_noise_state(n: int, embed_dim: int, t: int, rng: torch.Generator,
                     dtype: torch.dtype = torch.float32) -> DiffusionState:
    """All-background target for images without persons: i.i.d. N(0, I)."""
    return DiffusionState(
        boxes=torch.randn((n, 4), generator=rng, dtype=dtype),
        embeds=torch.randn((n, embed_dim), generator=rng, dtype=dtype),
        t=t,
    )


def sample_timestep(T: int, rng: torch.Generator) -> int:
    """Uniform draw from {1, ..., T}."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    return int(torch.randint(1, T + 1, (1,), generator=rng).item())


def normalize_embeddings(e: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """L2-normalize rows onto the unit sphere (idempotent)."""
    return e / e.norm(dim=-1, keepdim=True).clamp(min=eps)
