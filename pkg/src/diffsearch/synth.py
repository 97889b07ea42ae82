"""Synthetic person-search scenes with crop-recoverable identity signatures.

Each identity owns a two-tone appearance (upper/lower body colors sampled
from a well-separated palette); scenes place 1..k persons over a smooth
background with pose jitter and optional occlusion. A nearest-signature
classifier over ground-truth crops certifies that identities are
recoverable before any model training ("learnability oracle").
"""

from __future__ import annotations

import colorsys

import numpy as np

from .config import SynthConfig
from .data import AnnotatedScene, Dataset
from .errors import ConfigError
from .teacher import UNLABELED

UPPER_FRACTION = 0.45


def identity_palette(n_identities: int, rng: np.random.Generator) -> np.ndarray:
    """(n, 2, 3) upper/lower RGB colors, hues spread for separability."""
    colors = np.zeros((n_identities, 2, 3))
    lower_order = rng.permutation(n_identities)
    for i in range(n_identities):
        hue_u = (i / n_identities + rng.uniform(-0.15, 0.15) / n_identities) % 1.0
        hue_l = (lower_order[i] / n_identities + 0.5 / n_identities) % 1.0
        colors[i, 0] = colorsys.hsv_to_rgb(hue_u, rng.uniform(0.75, 0.95), rng.uniform(0.75, 0.95))
        colors[i, 1] = colorsys.hsv_to_rgb(hue_l, rng.uniform(0.75, 0.95), rng.uniform(0.65, 0.9))
    return colors


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(0.3, 0.6, size=(8, 8, 3)).astype(np.float32)
    tint = rng.uniform(-0.05, 0.05, size=3).astype(np.float32)
    xs = np.linspace(0, 7, size)
    x0 = np.floor(xs).astype(int).clip(0, 6)
    frac = (xs - x0).astype(np.float32)
    rows = coarse[x0] * (1 - frac[:, None, None]) + coarse[x0 + 1] * frac[:, None, None]
    img = (rows[:, x0] * (1 - frac[None, :, None]) + rows[:, x0 + 1] * frac[None, :, None])
    img = img + tint + rng.normal(0, 0.015, size=(size, size, 3)).astype(np.float32)
    return img.clip(0, 1)


def _paint_person(img: np.ndarray, box_px: tuple, colors: np.ndarray,
                  rng: np.random.Generator) -> None:
    x1, y1, x2, y2 = box_px
    split = y1 + max(1, round((y2 - y1) * UPPER_FRACTION))
    for (ya, yb), color in (((y1, split), colors[0]), ((split, y2), colors[1])):
        if yb <= ya:
            continue
        patch = color[None, None, :] + rng.normal(0, 0.03, size=(yb - ya, x2 - x1, 3))
        img[ya:yb, x1:x2] = patch.clip(0, 1)


def _iou_px(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union else 0.0


def _place_box(size: int, spec: SynthConfig, placed: list, rng: np.random.Generator):
    lo, hi = spec.person_height
    for attempt in range(60):
        h = int(rng.integers(lo, hi + 1))
        aspect = 0.45 * (1 + spec.jitter * rng.uniform(-1, 1))
        w = max(3, round(h * aspect))
        if w >= size or h >= size:
            continue
        x1 = int(rng.integers(0, size - w))
        y1 = int(rng.integers(0, size - h))
        box = (x1, y1, x1 + w, y1 + h)
        allow = 0.4 if rng.uniform() < spec.occlusion_rate else 0.1
        if all(_iou_px(box, other) <= allow for other in placed):
            return box
    return None


def generate_synthetic(spec: SynthConfig) -> tuple[Dataset, np.ndarray]:
    """Deterministic synthetic dataset plus the identity signature table.

    Each identity appears in at least two scenes of each split so it can
    serve as a query with a non-empty gallery.
    """
    rng = np.random.default_rng(spec.seed)
    palette = identity_palette(spec.n_identities, rng)

    def build_split(n_scenes: int, prefix: str) -> list:
        required = 2 * spec.n_identities
        if n_scenes * spec.persons_max < required or n_scenes < 2:
            raise ConfigError(f"{prefix}: {n_scenes} scenes cannot host every identity twice")
        counts = rng.integers(spec.persons_min, spec.persons_max + 1, size=n_scenes)
        bump = 0
        while counts.sum() < required:
            if counts[bump % n_scenes] < spec.persons_max:
                counts[bump % n_scenes] += 1
            bump += 1
        slots: list[list[int]] = [[] for _ in range(n_scenes)]
        # two guaranteed appearances per identity, round-robin over scenes
        cursor = 0
        for ident in list(range(spec.n_identities)) * 2:
            placed = False
            for probe in range(n_scenes):
                scene = (cursor + probe) % n_scenes
                if len(slots[scene]) < counts[scene] and ident not in slots[scene]:
                    slots[scene].append(ident)
                    cursor = scene + 1
                    placed = True
                    break
            if not placed:  # grow a conflict-free scene if capacity allows
                for scene in range(n_scenes):
                    if counts[scene] < spec.persons_max and ident not in slots[scene]:
                        counts[scene] += 1
                        slots[scene].append(ident)
                        placed = True
                        break
            if not placed:
                raise ConfigError("cannot satisfy the two-appearances guarantee")
        for scene in range(n_scenes):
            attempts = 0
            while len(slots[scene]) < counts[scene] and attempts < 100:
                ident = int(rng.integers(0, spec.n_identities))
                attempts += 1
                if ident in slots[scene]:
                    continue
                slots[scene].append(ident)

        scenes = []
        for idx in range(n_scenes):
            img = _background(spec.scene_size, rng)
            placed, boxes, idents = [], [], []
            for ident in slots[idx]:
                box = _place_box(spec.scene_size, spec, placed, rng)
                if box is None:
                    raise ConfigError("scene too crowded for the configured person sizes")
                placed.append(box)
                _paint_person(img, box, palette[ident], rng)
                boxes.append([box[0] / spec.scene_size, box[1] / spec.scene_size,
                              box[2] / spec.scene_size, box[3] / spec.scene_size])
                label = UNLABELED if rng.uniform() < spec.unlabeled_rate else ident
                idents.append(label)
            scenes.append(AnnotatedScene(
                scene_id=f"{prefix}{idx:05d}",
                image=np.round(img * 255).astype(np.uint8).astype(np.float32) / 255.0,
                boxes=np.array(boxes).reshape(-1, 4), identities=idents))
        return scenes

    train = build_split(spec.train_scenes, "tr")
    test = build_split(spec.test_scenes, "te")
    dataset = Dataset(train=train, test=test, identities=list(range(spec.n_identities)),
                      meta={"synthetic": True})
    return dataset, palette


def crop_signature(image: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Mean upper/lower colors of a ground-truth crop; 6-dim."""
    h, w = image.shape[:2]
    x1, y1 = int(round(box[0] * w)), int(round(box[1] * h))
    x2, y2 = int(round(box[2] * w)), int(round(box[3] * h))
    x2, y2 = max(x2, x1 + 1), max(y2, y1 + 1)
    split = y1 + max(1, round((y2 - y1) * UPPER_FRACTION))
    split = min(split, y2 - 1) if y2 - y1 > 1 else y2
    upper = image[y1:split, x1:x2].reshape(-1, 3)
    lower = image[split:y2, x1:x2].reshape(-1, 3)
    if len(lower) == 0:
        lower = upper
    return np.concatenate([upper.mean(axis=0), lower.mean(axis=0)])


def signature_accuracy(scenes, palette: np.ndarray) -> float:
    """Learnability oracle: nearest-signature identity accuracy on GT crops."""
    signatures = palette.reshape(len(palette), 6)
    hits = total = 0
    for scene in scenes:
        for box, ident in zip(scene.boxes, scene.identities):
            if ident == UNLABELED:
                continue
            sig = crop_signature(scene.image, box)
            pred = int(np.argmin(((signatures - sig) ** 2).sum(axis=1)))
            hits += int(pred == ident)
            total += 1
    return hits / total if total else 0.0
