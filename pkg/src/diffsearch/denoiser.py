"""Conditional feature extractor and the collaborative denoising layer.

The extractor is a small conv pyramid with top-down fusion (stride schedule
{4, 8, 16, 32} truncated to the configured number of levels); full-scale
backbones can be swapped in behind the same interface. The denoising layer
pools per-proposal region features, fuses the detection and embedding
streams (self-attention across proposals, dynamic per-proposal convolution,
cross-attention), and predicts embeddings first, feeding them as object
features to the detection head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import ConfigError
from .geometry import decode_boxes, repair_corners
from .schedule import DiffusionState, NoiseConfig

STRIDE_SCHEDULE = (4, 8, 16, 32)


@dataclass
class ConditionFeatures:
    """Multi-scale conditional features for one batch of images."""

    maps: list  # level -> (B, C, H_l, W_l)
    strides: tuple
    image_size: tuple  # (H, W) before padding

    @property
    def batch_size(self) -> int:
        return self.maps[0].shape[0]


@dataclass
class PredictionSet:
    """N (box, objectness, embedding) triples for one image.

    Boxes are in normalized annotation space; scores are sigmoid(logits);
    embeds are L2-normalized rows.
    """

    boxes: torch.Tensor
    scores: torch.Tensor
    embeds: torch.Tensor
    logits: torch.Tensor

    def __len__(self) -> int:
        return int(self.boxes.shape[0])


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos positional embedding of (possibly fractional) timesteps."""
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=t.dtype, device=t.device)
                      * -(math.log(10000.0) / max(half - 1, 1)))
    args = t[:, None].to(freqs.dtype) * freqs[None, :]
    emb = torch.cat([args.sin(), args.cos()], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def apply_box_deltas(boxes_in: torch.Tensor, deltas: torch.Tensor,
                     min_size: float = 0.05, max_log_scale: float = 2.0) -> torch.Tensor:
    """Deltas relative to the input box: center offsets in units of its own
    width/height, log-scale width/height changes.

    The reference size is floored so degenerate input boxes can still move
    and grow; outputs are clamped into [0, 1] with corner repair.
    """
    cx = (boxes_in[..., 0] + boxes_in[..., 2]) / 2
    cy = (boxes_in[..., 1] + boxes_in[..., 3]) / 2
    w = (boxes_in[..., 2] - boxes_in[..., 0]).clamp(min=min_size)
    h = (boxes_in[..., 3] - boxes_in[..., 1]).clamp(min=min_size)
    nx = cx + deltas[..., 0] * w
    ny = cy + deltas[..., 1] * h
    nw = w * deltas[..., 2].clamp(-max_log_scale, max_log_scale).exp()
    nh = h * deltas[..., 3].clamp(-max_log_scale, max_log_scale).exp()
    out = torch.stack([nx - nw / 2, ny - nh / 2, nx + nw / 2, ny + nh / 2], dim=-1)
    return repair_corners(out.clamp(0.0, 1.0))


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    # replicate padding keeps constant inputs constant through the stack
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="replicate"),
        nn.GroupNorm(min(8, cout), cout),
        nn.SiLU(),
    )


class BackboneFPN(nn.Module):
    """Small conv pyramid with top-down feature fusion.

    Emits ``levels`` maps of uniform channel width at strides 4, 8, ... .
    The fusion convs carry no bias so a constant input yields spatially
    uniform features at every level.
    """

    def __init__(self, levels: int = 3, channels: int = 64, stem_width: int = 24):
        super().__init__()
        if not 2 <= levels <= len(STRIDE_SCHEDULE):
            raise ConfigError(f"levels must be in [2, {len(STRIDE_SCHEDULE)}], got {levels}")
        self.levels = levels
        self.channels = channels
        self.strides = STRIDE_SCHEDULE[:levels]
        w = stem_width
        widths = [w, 2 * w, 4 * w, 6 * w, 8 * w][: levels + 1]
        self.stem = _conv_block(3, widths[0], stride=2)
        self.stages = nn.ModuleList(
            nn.Sequential(
                _conv_block(widths[i], widths[i + 1], stride=2),
                _conv_block(widths[i + 1], widths[i + 1], stride=1),
            )
            for i in range(levels)
        )
        self.laterals = nn.ModuleList(
            nn.Conv2d(widths[i + 1], channels, 1, bias=False) for i in range(levels))
        self.outputs = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate",
                      bias=False) for _ in range(levels))

    def forward(self, images: torch.Tensor) -> ConditionFeatures:
        h, w = images.shape[-2:]
        max_stride = self.strides[-1]
        if h < max_stride or w < max_stride:
            raise ConfigError(f"image {h}x{w} smaller than the coarsest stride {max_stride}")
        pad_h = (-h) % max_stride
        pad_w = (-w) % max_stride
        if pad_h or pad_w:
            images = F.pad(images, (0, pad_w, 0, pad_h))

        x = self.stem(images)
        stage_outs = []
        for stage in self.stages:
            x = stage(x)
            stage_outs.append(x)

        laterals = [lat(s) for lat, s in zip(self.laterals, stage_outs)]
        for lvl in range(self.levels - 2, -1, -1):
            laterals[lvl] = laterals[lvl] + F.interpolate(
                laterals[lvl + 1], size=laterals[lvl].shape[-2:], mode="nearest")
        maps = [out(lat) for out, lat in zip(self.outputs, laterals)]
        return ConditionFeatures(maps=maps, strides=self.strides, image_size=(h, w))


def _bilinear_sample(fmap: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Sample (B, C, H, W) at pixel-center coordinates px, py of shape (B, K)."""
    b, c, h, w = fmap.shape
    px = px.clamp(0, w - 1)
    py = py.clamp(0, h - 1)
    x0 = px.floor().long().clamp(0, max(w - 2, 0))
    y0 = py.floor().long().clamp(0, max(h - 2, 0))
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    tx = (px - x0.to(px.dtype)).clamp(0, 1).unsqueeze(-1)
    ty = (py - y0.to(py.dtype)).clamp(0, 1).unsqueeze(-1)

    flat = fmap.flatten(2).transpose(1, 2)  # (B, H*W, C)

    def take(yi, xi):
        idx = (yi * w + xi).unsqueeze(-1).expand(-1, -1, c)
        return torch.gather(flat, 1, idx)

    top = take(y0, x0) * (1 - tx) + take(y0, x1) * tx
    bot = take(y1, x0) * (1 - tx) + take(y1, x1) * tx
    return top * (1 - ty) + bot * ty


def assign_levels(boxes: torch.Tensor, image_size: tuple, strides, base_factor: float = 2.0) -> torch.Tensor:
    """FPN-style level assignment by sqrt(box area) in pixels.

    Level k gets boxes whose scale falls in [base*2^k, base*2^(k+1)) with
    base = base_factor * strides[0]; out-of-range scales clamp to the ends.
    """
    h, w = image_size
    scale = ((boxes[..., 2] - boxes[..., 0]).clamp(min=0) * w
             * (boxes[..., 3] - boxes[..., 1]).clamp(min=0) * h).sqrt()
    base = base_factor * strides[0]
    lvl = torch.floor(torch.log2(scale.clamp(min=1e-6) / base))
    return lvl.clamp(0, len(strides) - 1).long()


def pool_regions(cond: ConditionFeatures, boxes: torch.Tensor, pool_size: int = 7) -> torch.Tensor:
    """RoIAlign-style pooling of annotation-space boxes into (B, N, S*S, C).

    Each pooled cell is the bilinear sample at the cell center; boxes are
    routed to pyramid levels by scale. Degenerate boxes collapse to a
    single repeated sample rather than erroring.
    """
    bsz, n = boxes.shape[:2]
    s = pool_size
    h_img, w_img = cond.image_size
    levels = assign_levels(boxes, cond.image_size, cond.strides)

    offsets = (torch.arange(s, dtype=boxes.dtype, device=boxes.device) + 0.5) / s
    out = torch.zeros(bsz, n, s * s, cond.maps[0].shape[1],
                      dtype=cond.maps[0].dtype, device=boxes.device)
    for lvl, (fmap, stride) in enumerate(zip(cond.maps, cond.strides)):
        mask = levels == lvl
        if not mask.any():
            continue
        x1 = boxes[..., 0] * w_img / stride
        y1 = boxes[..., 1] * h_img / stride
        bw = (boxes[..., 2] - boxes[..., 0]) * w_img / stride
        bh = (boxes[..., 3] - boxes[..., 1]) * h_img / stride
        # (B, N, S): cell centers along each axis, then pixel-center coords
        cx = x1[..., None] + offsets * bw[..., None] - 0.5
        cy = y1[..., None] + offsets * bh[..., None] - 0.5
        px = cx[:, :, None, :].expand(-1, -1, s, -1).reshape(bsz, n * s * s)
        py = cy[:, :, :, None].expand(-1, -1, -1, s).reshape(bsz, n * s * s)
        sampled = _bilinear_sample(fmap, px, py).reshape(bsz, n, s * s, -1)
        out = torch.where(mask[:, :, None, None], sampled, out)
    return out


class CollaborativeDenoisingLayer(nn.Module):
    """Fuses the detection and embedding streams and predicts clean targets.

    The interaction submodules (self-attention, dynamic convolution,
    cross-attention) and the cascaded/parallel head wiring are runtime
    switches, so one parameter set supports every ablation arm. The
    detection head always consumes ``concat([embedding feed, fused feed])``;
    parallel wiring zeroes the embedding feed, pure cascade zeroes the
    fused feed.
    """

    def __init__(self, cfg: ModelConfig, embed_dim: int):
        super().__init__()
        c = cfg.channels
        s2 = cfg.pool_size * cfg.pool_size
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.use_self_attention = cfg.use_self_attention
        self.use_dynamic_conv = cfg.use_dynamic_conv
        self.use_cross_attention = cfg.use_cross_attention
        self.cascaded = cfg.cascaded
        self.cascade_concat = cfg.cascade_concat

        self.embed_proj = nn.Linear(embed_dim, c)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim))
        self.film_d = nn.Linear(cfg.time_dim, 2 * c)
        self.film_r = nn.Linear(cfg.time_dim, 2 * c)
        self.film_c = nn.Linear(cfg.time_dim, 4 * c)

        self.sa_norm = nn.LayerNorm(c)
        self.self_attn = nn.MultiheadAttention(c, cfg.num_heads, batch_first=True)
        self.dc_norm = nn.LayerNorm(c)
        self.kernel_gen = nn.Linear(c, c * c)
        self.ca_norm_q = nn.LayerNorm(c)
        self.ca_norm_kv = nn.LayerNorm(c)
        self.cross_attn = nn.MultiheadAttention(c, cfg.num_heads, batch_first=True)

        self.det_reduce = nn.Linear(s2 * c, c)
        self.embed_head = nn.Sequential(
            nn.Linear(2 * c, 2 * c), nn.SiLU(), nn.Linear(2 * c, embed_dim))
        self.det_trunk = nn.Sequential(
            nn.Linear(embed_dim + 2 * c, 2 * c), nn.SiLU(),
            nn.Linear(2 * c, 2 * c), nn.SiLU())
        self.box_out = nn.Linear(2 * c, 4)
        self.cls_out = nn.Linear(2 * c, 1)
        self._init_weights()

    def _init_weights(self):
        for module in [self.embed_proj, self.film_d, self.film_r, self.film_c,
                       self.kernel_gen, self.det_reduce]:
            nn.init.xavier_uniform_(module.weight)
            nn.init.zeros_(module.bias)
        for seq in [self.embed_head, self.det_trunk, self.time_mlp]:
            for layer in seq:
                if isinstance(layer, nn.Linear):
                    nn.init.xavier_uniform_(layer.weight)
                    nn.init.zeros_(layer.bias)
        nn.init.xavier_uniform_(self.box_out.weight)
        nn.init.zeros_(self.box_out.bias)
        nn.init.xavier_uniform_(self.cls_out.weight)
        # focal-loss prior so early objectness starts near 0.01
        nn.init.constant_(self.cls_out.bias, -math.log((1 - 0.01) / 0.01))

    def interact(self, f_d: torch.Tensor, f_r: torch.Tensor) -> torch.Tensor:
        """Collaborative interaction; returns fused features (B, N, 2C)."""
        bsz, n, s2, c = f_d.shape
        if self.use_self_attention:
            tokens = self.sa_norm(f_d.mean(dim=2))
            attn, _ = self.self_attn(tokens, tokens, tokens, need_weights=False)
            f_d = f_d + attn.unsqueeze(2)
        if self.use_dynamic_conv:
            kernels = self.kernel_gen(f_r).view(bsz, n, c, c)
            f_d = f_d + torch.einsum("bnsc,bncd->bnsd", self.dc_norm(f_d), kernels)
        if self.use_cross_attention:
            q = self.ca_norm_q(f_r).reshape(bsz * n, 1, c)
            kv = self.ca_norm_kv(f_d).reshape(bsz * n, s2, c)
            attn, _ = self.cross_attn(q, kv, kv, need_weights=False)
            f_r = f_r + attn.reshape(bsz, n, c)
        det_vec = self.det_reduce(f_d.flatten(2))
        return torch.cat([det_vec, f_r], dim=-1)

    def forward(self, f_d: torch.Tensor, e_t: torch.Tensor, boxes_in: torch.Tensor,
                t: torch.Tensor):
        """Predict clean boxes, objectness logits and embeddings.

        f_d: pooled region features (B, N, S*S, C); e_t: noisy embeddings
        (B, N, D); boxes_in: annotation-space input boxes the deltas are
        relative to; t: per-image timesteps (B,).
        """
        t_emb = self.time_mlp(sinusoidal_embedding(t.to(f_d.dtype), self.cfg.time_dim))
        f_r = self.embed_proj(e_t)
        scale, shift = self.film_r(t_emb).chunk(2, dim=-1)
        f_r = f_r * (1 + scale[:, None]) + shift[:, None]
        scale, shift = self.film_d(t_emb).chunk(2, dim=-1)
        f_d = f_d * (1 + scale[:, None, None]) + shift[:, None, None]

        f_c = self.interact(f_d, f_r)
        scale, shift = self.film_c(t_emb).chunk(2, dim=-1)
        f_c = f_c * (1 + scale[:, None]) + shift[:, None]

        e_raw = self.embed_head(f_c)
        e_hat = e_raw / e_raw.norm(dim=-1, keepdim=True).clamp(min=1e-12)
        e_feed = e_hat if self.cascaded else torch.zeros_like(e_hat)
        fc_feed = f_c if (self.cascade_concat or not self.cascaded) else torch.zeros_like(f_c)
        h = self.det_trunk(torch.cat([e_feed, fc_feed], dim=-1))
        delta = self.box_out(h)
        logits = self.cls_out(h).squeeze(-1)
        boxes = apply_box_deltas(boxes_in, delta)
        return boxes, logits, e_hat


class DenoisingModel(nn.Module):
    """Backbone + collaborative denoising layer behind the sampler interface."""

    def __init__(self, model_cfg: ModelConfig, noise_cfg: NoiseConfig):
        super().__init__()
        self.cfg = model_cfg
        self.noise = noise_cfg
        self.backbone = BackboneFPN(model_cfg.levels, model_cfg.channels, model_cfg.stem_width)
        self.cdl = CollaborativeDenoisingLayer(model_cfg, noise_cfg.embed_dim)

    def extract_condition(self, images: torch.Tensor) -> ConditionFeatures:
        """Multi-scale conditional features; images are (B, 3, H, W) in [0, 1]."""
        return self.backbone(images)

    def denoise_batch(self, cond: ConditionFeatures, boxes_signal: torch.Tensor,
                      embeds: torch.Tensor, t: torch.Tensor) -> dict:
        """Batched denoising pass; see :meth:`denoise` for the per-image view."""
        boxes_in = decode_boxes(boxes_signal, self.noise.s1)
        f_d = pool_regions(cond, boxes_in, self.cfg.pool_size)
        boxes, logits, e_hat = self.cdl(f_d, embeds, boxes_in, t)
        return {"boxes": boxes, "logits": logits, "scores": torch.sigmoid(logits),
                "embeds": e_hat}

    def denoise(self, state: DiffusionState, cond: ConditionFeatures, t: int) -> PredictionSet:
        """One collaborative denoising pass over a per-image diffusion state."""
        if state.t != t:
            raise ValueError(f"state is at t={state.t}, denoise called with t={t}")
        out = self.denoise_batch(cond, state.boxes[None], state.embeds[None],
                                 torch.as_tensor([t], dtype=state.boxes.dtype))
        return PredictionSet(boxes=out["boxes"][0], scores=out["scores"][0],
                             embeds=out["embeds"][0], logits=out["logits"][0])
