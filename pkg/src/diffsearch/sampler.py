"""Iterative inference: denoise from pure noise along a sparse timestep grid.

Each step runs one collaborative denoising pass and moves the diffusion
state to the next grid timestep with a deterministic update (eta=0 by
default). Condition features depend only on the image, so they are
computed once per scene and reused across steps, which is
behavior-identical to recomputing them in the loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .config import SamplerConfig
from .denoiser import PredictionSet
from .geometry import encode_boxes, pairwise_iou
from .schedule import DiffusionState, NoiseConfig, ScheduleTable, normalize_embeddings


@dataclass
class TrajectoryRecord:
    """Per-step prediction snapshots for diagnostics and per-step metrics."""

    timesteps: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # PredictionSet per step

    def append(self, t: int, pred: PredictionSet) -> None:
        self.timesteps.append(int(t))
        self.snapshots.append(pred)

    def __len__(self) -> int:
        return len(self.snapshots)

    def to_records(self, scene_id: str) -> list[dict]:
        out = []
        for k, (t, pred) in enumerate(zip(self.timesteps, self.snapshots)):
            out.append({
                "scene_id": scene_id,
                "step": k,
                "t": t,
                "boxes": pred.boxes.tolist(),
                "scores": pred.scores.tolist(),
            })
        return out


def init_state(n_test: int, embed_dim: int, T: int, rng: torch.Generator,
               dtype: torch.dtype = torch.float32) -> DiffusionState:
    """Start of inference: i.i.d. standard-normal boxes and embeddings at t=T."""
    if n_test < 1:
        raise ValueError(f"n_test must be >= 1, got {n_test}")
    return DiffusionState(
        boxes=torch.randn((n_test, 4), generator=rng, dtype=dtype),
        embeds=torch.randn((n_test, embed_dim), generator=rng, dtype=dtype),
        t=T,
    )


def ddim_step(state: DiffusionState, pred: PredictionSet, t_next: int,
              sched: ScheduleTable, noise: NoiseConfig, eta: float = 0.0,
              rng: torch.Generator | None = None) -> DiffusionState:
    """Move the state from its timestep to t_next using the predicted targets.

    The predicted clean signals are re-encoded into signal space and
    clamped to [-s1, s1] / [-s2, s2]; the implied noise is extrapolated to
    t_next. eta > 0 adds the scaled stochastic term.
    """
    t = state.t
    if t_next >= t:
        raise ValueError(f"t_next must decrease: got {t} -> {t_next}")
    ab_t = float(sched.alpha_bar[t])
    ab_n = float(sched.alpha_bar[t_next])

    b0 = encode_boxes(pred.boxes, noise.s1).clamp(-noise.s1, noise.s1)
    e0 = (noise.s2 * normalize_embeddings(pred.embeds)).clamp(-noise.s2, noise.s2)

    def step_channel(x_t: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
        eps_hat = (x_t - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
        if eta == 0.0:
            return math.sqrt(ab_n) * x0 + math.sqrt(1.0 - ab_n) * eps_hat
        sigma = (eta * math.sqrt((1.0 - ab_n) / (1.0 - ab_t))
                 * math.sqrt(max(1.0 - ab_t / ab_n, 0.0)))
        coeff = math.sqrt(max(1.0 - ab_n - sigma**2, 0.0))
        z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
        return math.sqrt(ab_n) * x0 + coeff * eps_hat + sigma * z

    return DiffusionState(boxes=step_channel(state.boxes, b0),
                          embeds=step_channel(state.embeds, e0),
                          t=t_next)


def run_inference(image: torch.Tensor, model, sched: ScheduleTable,
                  cfg: SamplerConfig, rng: torch.Generator,
                  n_test: int | None = None) -> tuple[PredictionSet, TrajectoryRecord]:
    """Full iterative inference for one scene; model must be in eval mode.

    Returns the final-step raw predictions plus the per-step trajectory;
    apply :func:`postprocess` for filtered detections.
    """
    if n_test is None:
        n_test = model.cfg.n_test
    grid = cfg.time_grid(sched.T)
    trajectory = TrajectoryRecord()
    with torch.no_grad():
        cond = model.extract_condition(image[None])
        state = init_state(n_test, model.noise.embed_dim, sched.T, rng)
        pred = None
        for k, t in enumerate(grid):
            pred = model.denoise(state, cond, t)
            trajectory.append(t, pred)
            if k + 1 < len(grid):
                state = ddim_step(state, pred, grid[k + 1], sched, model.noise,
                                  eta=cfg.eta, rng=rng)
                if cfg.renewal:
                    state = _renew(state, pred.scores, cfg.renewal_thresh, rng)
    return pred, trajectory


def _renew(state: DiffusionState, scores: torch.Tensor, thresh: float,
           rng: torch.Generator) -> DiffusionState:
    """Replace sub-threshold proposals with fresh noise (off by default)."""
    keep = scores >= thresh
    if keep.all():
        return state
    boxes = state.boxes.clone()
    embeds = state.embeds.clone()
    drop = ~keep
    boxes[drop] = torch.randn((int(drop.sum()), 4), generator=rng, dtype=boxes.dtype)
    embeds[drop] = torch.randn((int(drop.sum()), embeds.shape[1]), generator=rng,
                               dtype=embeds.dtype)
    return DiffusionState(boxes=boxes, embeds=embeds, t=state.t)


def postprocess(pred: PredictionSet, score_thresh: float = 0.5,
                nms_iou: float = 0.5, nms_on: bool = True) -> PredictionSet:
    """Score filter, then greedy NMS by descending score.

    Embeddings travel with their surviving boxes.
    """
    if not 0 <= score_thresh <= 1 or not 0 <= nms_iou <= 1:
        raise ValueError("thresholds must lie in [0, 1]")
    keep = pred.scores >= score_thresh
    boxes, scores = pred.boxes[keep], pred.scores[keep]
    embeds, logits = pred.embeds[keep], pred.logits[keep]
    if nms_on and len(boxes) > 1:
        order = torch.argsort(scores, descending=True, stable=True)
        boxes, scores, embeds, logits = boxes[order], scores[order], embeds[order], logits[order]
        iou = pairwise_iou(boxes, boxes)
        n = len(boxes)
        alive = torch.ones(n, dtype=torch.bool)
        for i in range(n):
            if not alive[i]:
                continue
            suppressed = iou[i] > nms_iou
            suppressed[: i + 1] = False
            alive &= ~suppressed
        boxes, scores, embeds, logits = boxes[alive], scores[alive], embeds[alive], logits[alive]
    return PredictionSet(boxes=boxes, scores=scores, embeds=embeds, logits=logits)
