"""Teacher embedders supplying ground-truth identity embeddings for training.

The teacher is frozen, used only while training the denoiser, and absent
from the inference path. Two implementations are provided: an oracle that
assigns each identity a fixed random unit vector (the default for
benchmarks, since it removes teacher quality as a confound) and a small
trainable crop encoder pretrained on identity classification.
"""

from __future__ import annotations

import hashlib
import json
import struct
from abc import ABC, abstractmethod
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError

# Sentinel identity for annotated boxes without an identity label.
UNLABELED = -1

_CROP_SIZE = 24


class TeacherEmbedder(ABC):
    """Maps (scene image, box) to a unit-norm embedding of dimension embed_dim.

    Outputs are deterministic once the teacher is frozen.
    """

    embed_dim: int

    @abstractmethod
    def embed(self, image: np.ndarray, box: np.ndarray, identity: int = UNLABELED,
              fallback_key: tuple = ()) -> np.ndarray:
        """Return a unit-norm (embed_dim,) float32 vector for one box.

        ``identity`` carries the annotation label when present;
        ``fallback_key`` disambiguates unlabeled boxes (e.g. (scene_id, box_index)).
        """

    @abstractmethod
    def fingerprint(self) -> str:
        """Stable hash of the teacher's parameters, for cache validation."""

    def embed_scene(self, image: np.ndarray, boxes: np.ndarray, identities,
                    scene_id: str = "") -> np.ndarray:
        """Embed every annotated box of one scene; returns (M, embed_dim)."""
        out = np.zeros((len(boxes), self.embed_dim), dtype=np.float32)
        for i, box in enumerate(boxes):
            ident = int(identities[i])
            out[i] = self.embed(image, np.asarray(box), ident, fallback_key=(scene_id, i))
        return out


def _check_box(box: np.ndarray) -> None:
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,):
        raise ValueError(f"box must have shape (4,), got {box.shape}")
    if not (0 - 1e-6 <= box[0] <= box[2] <= 1 + 1e-6 and 0 - 1e-6 <= box[1] <= box[3] <= 1 + 1e-6):
        raise ValueError(f"invalid box {box.tolist()}")


class OracleTeacher(TeacherEmbedder):
    """Identity -> fixed unit vector, drawn independently uniform on the sphere.

    The vector for identity k is a pure function of (seed, k), so the table
    needs no precomputation and any query order yields identical results.
    """

    def __init__(self, embed_dim: int = 256, seed: int = 0):
        if embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {embed_dim}")
        self.embed_dim = embed_dim
        self.seed = seed

    def _vector(self, key) -> np.ndarray:
        material = json.dumps(["oracle", self.seed, key], sort_keys=True).encode()
        derived = int.from_bytes(hashlib.sha256(material).digest()[:8], "little")
        rng = np.random.default_rng(derived)
        v = rng.standard_normal(self.embed_dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def embed(self, image, box, identity=UNLABELED, fallback_key=()):
        _check_box(box)
        if identity == UNLABELED:
            return self._vector(["unlabeled", list(fallback_key)])
        return self._vector(int(identity))

    def fingerprint(self) -> str:
        return hashlib.sha256(f"oracle/{self.embed_dim}/{self.seed}".encode()).hexdigest()


class _CropNet(nn.Module):
    """Tiny conv encoder over fixed-size person crops."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.GroupNorm(4, 16),
            nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GroupNorm(8, 64),
            nn.SiLU(),
        )
        self.head = nn.Linear(64, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x).mean(dim=(2, 3))
        e = self.head(h)
        return e / e.norm(dim=-1, keepdim=True).clamp(min=1e-12)


class CropEncoderTeacher(TeacherEmbedder):
    """Frozen conv encoder over person crops; pretrain with
    :func:`pretrain_crop_encoder` before use."""

    def __init__(self, net: _CropNet, embed_dim: int):
        self.embed_dim = embed_dim
        self.net = net
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def _crop(self, image: np.ndarray, box: np.ndarray) -> torch.Tensor:
        h, w = image.shape[:2]
        x1, y1, x2, y2 = box
        xa, xb = int(np.floor(x1 * w)), int(np.ceil(x2 * w))
        ya, yb = int(np.floor(y1 * h)), int(np.ceil(y2 * h))
        if xb - xa < 2 or yb - ya < 2:
            raise ValueError(f"near-zero-area crop for box {np.asarray(box).tolist()}")
        crop = torch.from_numpy(np.ascontiguousarray(image[ya:yb, xa:xb])).float()
        crop = crop.permute(2, 0, 1).unsqueeze(0)
        return torch.nn.functional.interpolate(
            crop, size=(_CROP_SIZE, _CROP_SIZE), mode="bilinear", align_corners=False)

    def embed(self, image, box, identity=UNLABELED, fallback_key=()):
        _check_box(box)
        with torch.no_grad():
            e = self.net(self._crop(image, np.asarray(box, dtype=np.float64)))
        return e[0].numpy().astype(np.float32)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.net.state_dict().items()):
            digest.update(name.encode())
            digest.update(p.numpy().tobytes())
        return digest.hexdigest()


def pretrain_crop_encoder(scenes, embed_dim: int = 256, epochs: int = 10,
                          seed: int = 0, lr: float = 1e-3) -> CropEncoderTeacher:
    """Train the crop encoder with identity classification, then freeze it.

    ``scenes`` is any sequence with .image (H, W, 3 float in [0, 1]),
    .boxes (M, 4 normalized) and .identities (M,) attributes. Unlabeled
    boxes are skipped.
    """
    crops, labels = [], []
    helper = CropEncoderTeacher(_CropNet(embed_dim), embed_dim)  # crop plumbing only
    for scene in scenes:
        for i, box in enumerate(np.asarray(scene.boxes)):
            ident = int(scene.identities[i])
            if ident == UNLABELED:
                continue
            crops.append(helper._crop(scene.image, box))
            labels.append(ident)
    ids = sorted(set(labels))
    if len(ids) < 2:
        raise ConfigError("crop-encoder pretraining needs at least two identities")
    id_to_class = {k: j for j, k in enumerate(ids)}
    x = torch.cat(crops, dim=0)
    y = torch.tensor([id_to_class[k] for k in labels], dtype=torch.long)

    torch.manual_seed(seed)
    net = _CropNet(embed_dim)
    classifier = nn.Linear(embed_dim, len(ids))
    opt = torch.optim.AdamW(list(net.parameters()) + list(classifier.parameters()), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    perm_rng = torch.Generator().manual_seed(seed)
    batch = 64
    net.train()
    for _ in range(epochs):
        order = torch.randperm(len(x), generator=perm_rng)
        for start in range(0, len(x), batch):
            idx = order[start:start + batch]
            opt.zero_grad()
            logits = classifier(net(x[idx]) * 8.0)  # temperature on unit-norm features
            loss = loss_fn(logits, y[idx])
            loss.backward()
            opt.step()
    return CropEncoderTeacher(net, embed_dim)


def cosine_separation(teacher: TeacherEmbedder, scenes) -> tuple[float, float]:
    """Mean same-identity and cross-identity cosine over all labeled box pairs."""
    embs, idents = [], []
    for scene in scenes:
        for i, box in enumerate(np.asarray(scene.boxes)):
            ident = int(scene.identities[i])
            if ident == UNLABELED:
                continue
            embs.append(teacher.embed(scene.image, box, ident))
            idents.append(ident)
    embs = np.stack(embs)
    idents = np.asarray(idents)
    sims = embs @ embs.T
    same_mask = (idents[:, None] == idents[None, :]) & ~np.eye(len(idents), dtype=bool)
    cross_mask = idents[:, None] != idents[None, :]
    return float(sims[same_mask].mean()), float(sims[cross_mask].mean())


class TeacherCache:
    """Disk cache of teacher embeddings keyed by (scene id, box index).

    Layout: ``<stem>.bin`` holds little-endian float32 records in manifest
    order; ``<stem>.json`` is the sidecar manifest with the dimension,
    teacher hash, and record keys.
    """

    def __init__(self, embed_dim: int, teacher_hash: str):
        self.embed_dim = embed_dim
        self.teacher_hash = teacher_hash
        self._table: dict[tuple[str, int], np.ndarray] = {}

    def put(self, scene_id: str, box_index: int, vec: np.ndarray) -> None:
        self._table[(scene_id, int(box_index))] = np.asarray(vec, dtype=np.float32)

    def get(self, scene_id: str, box_index: int) -> np.ndarray:
        return self._table[(scene_id, int(box_index))]

    def __contains__(self, key) -> bool:
        return (key[0], int(key[1])) in self._table

    def __len__(self) -> int:
        return len(self._table)

    def save(self, stem: Path) -> None:
        stem = Path(stem)
        keys = sorted(self._table.keys())
        with open(stem.with_suffix(".bin"), "wb") as fh:
            for key in keys:
                fh.write(struct.pack(f"<{self.embed_dim}f", *self._table[key].tolist()))
        manifest = {
            "embed_dim": self.embed_dim,
            "teacher_hash": self.teacher_hash,
            "dtype": "<f4",
            "records": [{"scene_id": s, "box_index": i} for s, i in keys],
        }
        stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, stem: Path) -> "TeacherCache":
        stem = Path(stem)
        manifest = json.loads(stem.with_suffix(".json").read_text())
        cache = cls(manifest["embed_dim"], manifest["teacher_hash"])
        raw = stem.with_suffix(".bin").read_bytes()
        dim = cache.embed_dim
        for n, rec in enumerate(manifest["records"]):
            vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=n * dim * 4)
            cache.put(rec["scene_id"], rec["box_index"], vec.copy())
        return cache


def materialize_teacher_cache(teacher: TeacherEmbedder, scenes) -> TeacherCache:
    """Embed every annotated box of every scene once."""
    cache = TeacherCache(teacher.embed_dim, teacher.fingerprint())
    for scene in scenes:
        embs = teacher.embed_scene(scene.image, np.asarray(scene.boxes),
                                   scene.identities, scene_id=scene.scene_id)
        for i in range(len(embs)):
            cache.put(scene.scene_id, i, embs[i])
    return cache
