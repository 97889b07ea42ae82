"""Optimal bipartite matching and the four-term set-prediction loss.

The same weighted form serves as the pairwise matching cost (with the
focal classification cost of the candidate's score) and as the training
loss, where classification supervises all N predictions and the box and
embedding terms apply to matched pairs only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import LossConfig
from .geometry import box_giou, pairwise_giou

_EPS = 1e-8


@dataclass
class MatchResult:
    """Injective assignment of ground truths to predictions."""

    gt_to_pred: np.ndarray  # (M,) prediction index per ground truth
    cost: float

    def __post_init__(self):
        if len(set(self.gt_to_pred.tolist())) != len(self.gt_to_pred):
            raise ValueError("assignment must be injective")


@dataclass
class LossBreakdown:
    """Unweighted loss terms plus the weighted total."""

    cls: torch.Tensor
    l1: torch.Tensor
    giou: torch.Tensor
    reid: torch.Tensor
    total: torch.Tensor

    def detach_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("cls", "l1", "giou", "reid", "total")}


def focal_cost(scores: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """Classification cost of matching a candidate with score p to a person.

    Positive focal term minus the negative term, so the cost strictly
    decreases as the score approaches 1.
    """
    pos = alpha * (1 - scores) ** gamma * (-(scores + _EPS).log())
    neg = (1 - alpha) * scores**gamma * (-(1 - scores + _EPS).log())
    return pos - neg


def pairwise_cost(pred_boxes: torch.Tensor, pred_scores: torch.Tensor,
                  pred_embeds: torch.Tensor, gt_boxes: torch.Tensor,
                  gt_embeds: torch.Tensor, reid_mask: torch.Tensor,
                  weights: LossConfig) -> torch.Tensor:
    """(M, N) matching cost matrix.

    reid_mask flags ground truths with identity labels; unlabeled rows
    carry no embedding cost.
    """
    m = gt_boxes.shape[0]
    if m < 1:
        raise ValueError("pairwise_cost requires at least one ground truth")
    cls = focal_cost(pred_scores, weights.focal_alpha, weights.focal_gamma)[None, :]
    l1 = (gt_boxes[:, None, :] - pred_boxes[None, :, :]).abs().sum(-1)
    giou = pairwise_giou(gt_boxes, pred_boxes)
    reid = (gt_embeds[:, None, :] - pred_embeds[None, :, :]).norm(dim=-1)
    reid = reid * reid_mask[:, None].to(reid.dtype)
    return (weights.cls * cls + weights.l1 * l1
            + weights.giou * (1 - giou) + weights.reid * reid)


def hungarian_match(cost) -> MatchResult:
    """Cost-minimal injective assignment of the M rows to the N columns."""
    cost = np.asarray(cost if not torch.is_tensor(cost) else cost.detach().cpu().numpy(),
                      dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    m, n = cost.shape
    if m > n:
        raise ValueError(f"more ground truths ({m}) than predictions ({n})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    return MatchResult(gt_to_pred=cols[order], cost=float(cost[rows, cols].sum()))


def focal_loss(logits: torch.Tensor, targets: torch.Tensor,
               alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Mean sigmoid focal loss; gamma=0, alpha=0.5 halves binary cross-entropy."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    targets = targets.to(logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return (alpha_t * (1 - p_t) ** gamma * ce).mean()


def reid_loss(e0_matched: torch.Tensor, ehat_matched: torch.Tensor) -> torch.Tensor:
    """Sum over matched pairs of the Euclidean embedding distance."""
    if e0_matched.shape != ehat_matched.shape:
        raise ValueError(f"shape mismatch {tuple(e0_matched.shape)} vs {tuple(ehat_matched.shape)}")
    return (e0_matched - ehat_matched).norm(dim=-1).sum()


def total_loss(pred_boxes: torch.Tensor, pred_logits: torch.Tensor,
               pred_embeds: torch.Tensor, gt_boxes: torch.Tensor,
               gt_embeds: torch.Tensor, reid_mask: torch.Tensor,
               match: MatchResult | None, weights: LossConfig) -> LossBreakdown:
    """Four-term loss for one image.

    Classification supervises all N predictions (matched slots positive,
    the rest background), as the focal sum normalized by the matched count;
    box and embedding terms average over matched pairs, the embedding term
    over labeled ones only. An image without persons passes match=None and
    is supervised as all background (focal sum).
    """
    n = pred_logits.shape[0]
    zero = pred_logits.sum() * 0
    targets = torch.zeros(n, dtype=pred_logits.dtype, device=pred_logits.device)
    if match is None:
        if gt_boxes.shape[0]:
            raise ValueError("match may be None only for images without ground truths")
        cls = focal_loss(pred_logits, targets, weights.focal_alpha, weights.focal_gamma) * n
        return LossBreakdown(cls=cls, l1=zero, giou=zero, reid=zero,
                             total=weights.cls * cls)

    sigma = torch.as_tensor(match.gt_to_pred, dtype=torch.long, device=pred_logits.device)
    targets[sigma] = 1.0
    # focal summed over all N, normalized by the number of matched pairs
    # (set-prediction convention; keeps the positive signal independent of N)
    m = gt_boxes.shape[0]
    cls = focal_loss(pred_logits, targets, weights.focal_alpha, weights.focal_gamma) * (n / m)

    matched_boxes = pred_boxes[sigma]
    l1 = (gt_boxes - matched_boxes).abs().sum(-1).mean()
    giou = (1 - box_giou(gt_boxes, matched_boxes)).mean()

    labeled = reid_mask.bool()
    if weights.reid != 0 and labeled.any():
        reid = reid_loss(gt_embeds[labeled], pred_embeds[sigma][labeled]) / labeled.sum()
    else:
        # a zero weight drops the term from the graph entirely
        reid = zero
    total = (weights.cls * cls + weights.l1 * l1
             + weights.giou * giou + weights.reid * reid)
    return LossBreakdown(cls=cls, l1=l1, giou=giou, reid=reid, total=total)


def match_and_loss(pred_boxes, pred_logits, pred_embeds, gt_boxes, gt_embeds,
                   reid_mask, weights: LossConfig) -> tuple[LossBreakdown, MatchResult | None]:
    """Match with detached costs, then compute the loss for one image."""
    if gt_boxes.shape[0] == 0:
        return total_loss(pred_boxes, pred_logits, pred_embeds, gt_boxes,
                          gt_embeds, reid_mask, None, weights), None
    with torch.no_grad():
        cost = pairwise_cost(pred_boxes, torch.sigmoid(pred_logits), pred_embeds,
                             gt_boxes, gt_embeds, reid_mask, weights)
    match = hungarian_match(cost)
    breakdown = total_loss(pred_boxes, pred_logits, pred_embeds, gt_boxes,
                           gt_embeds, reid_mask, match, weights)
    return breakdown, match
