"""Box representations, overlap measures, and the annotation/signal-space codec.

Boxes are ``(..., 4)`` tensors in corner format ``(x1, y1, x2, y2)``,
normalized to ``[0, 1]`` relative to image width/height. The diffusion
signal space rescales each coordinate to ``[-s1, s1]`` via
``v -> s1 * (2v - 1)``.

All functions are pure and stateless.
"""

from __future__ import annotations

import torch

# Smallest denominator used to keep divisions NaN-free; values this small
# only arise for degenerate boxes, where the result is masked anyway.
_TINY = 1e-12


def validate_boxes(boxes: torch.Tensor, tol: float = 1e-6) -> None:
    """Raise ValueError unless every box is a valid normalized corner box."""
    if boxes.shape[-1] != 4:
        raise ValueError(f"boxes must have last dim 4, got {tuple(boxes.shape)}")
    if not torch.isfinite(boxes).all():
        raise ValueError("boxes contain non-finite values")
    if (boxes < -tol).any() or (boxes > 1 + tol).any():
        raise ValueError("box coordinates must lie in [0, 1]")
    if (boxes[..., 2] - boxes[..., 0] < -tol).any() or (boxes[..., 3] - boxes[..., 1] < -tol).any():
        raise ValueError("boxes must satisfy x1 <= x2 and y1 <= y2")


def encode_boxes(boxes: torch.Tensor, s1: float) -> torch.Tensor:
    """Map normalized corner boxes to diffusion signal space: v -> s1*(2v - 1)."""
    if s1 <= 0:
        raise ValueError(f"s1 must be positive, got {s1}")
    validate_boxes(boxes)
    return s1 * (boxes * 2.0 - 1.0)


def decode_boxes(signal: torch.Tensor, s1: float) -> torch.Tensor:
    """Inverse of :func:`encode_boxes`, made total by clamping and corner repair.

    Out-of-range values are clamped into [0, 1]; inverted corners
    (x1 > x2 or y1 > y2), which can appear mid-trajectory, are repaired
    by swapping.
    """
    if s1 <= 0:
        raise ValueError(f"s1 must be positive, got {s1}")
    boxes = ((signal / s1 + 1.0) / 2.0).clamp(0.0, 1.0)
    return repair_corners(boxes)


def repair_corners(boxes: torch.Tensor) -> torch.Tensor:
    """Reorder corners so x1 <= x2 and y1 <= y2 (swap rule)."""
    x1 = torch.minimum(boxes[..., 0], boxes[..., 2])
    x2 = torch.maximum(boxes[..., 0], boxes[..., 2])
    y1 = torch.minimum(boxes[..., 1], boxes[..., 3])
    y2 = torch.maximum(boxes[..., 1], boxes[..., 3])
    return torch.stack([x1, y1, x2, y2], dim=-1)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]).clamp(min=0) * (boxes[..., 3] - boxes[..., 1]).clamp(min=0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of aligned box tensors.

    Zero-area pairs return 0 by convention.
    """
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    return torch.where(union > 0, inter / union.clamp(min=_TINY), torch.zeros_like(union))


def box_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise generalized IoU: IoU - (hull - union)/hull, in (-1, 1]."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    iou = torch.where(union > 0, inter / union.clamp(min=_TINY), torch.zeros_like(union))

    hull_lt = torch.minimum(a[..., :2], b[..., :2])
    hull_rb = torch.maximum(a[..., 2:], b[..., 2:])
    hull_wh = (hull_rb - hull_lt).clamp(min=0)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return torch.where(hull > 0, iou - (hull - union) / hull.clamp(min=_TINY), iou)


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU matrix of shape (M, N) for box sets a (M, 4) and b (N, 4)."""
    return box_iou(a[:, None, :], b[None, :, :])


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU matrix of shape (M, N) for box sets a (M, 4) and b (N, 4)."""
    return box_giou(a[:, None, :], b[None, :, :])
