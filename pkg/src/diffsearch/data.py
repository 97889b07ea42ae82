"""Annotated scenes and dataset ingestion.

The native format is JSON-lines (one scene per line) next to an image
directory; loaders for the CUHK-SYSU and PRW annotation layouts are
provided behind the same interface. Boxes are stored normalized in corner
format; identity -1 marks an annotated person without an identity label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataFormatError
from .teacher import UNLABELED


@dataclass
class AnnotatedScene:
    scene_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    boxes: np.ndarray  # (M, 4) normalized corners
    identities: np.ndarray  # (M,) int, UNLABELED for missing labels

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.identities = np.asarray(self.identities, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.identities):
            raise ValueError(f"scene {self.scene_id}: {len(self.boxes)} boxes vs "
                             f"{len(self.identities)} identities")

    @property
    def num_persons(self) -> int:
        return len(self.boxes)


@dataclass
class Dataset:
    train: list
    test: list
    identities: list  # identity registry (sorted labels)
    meta: dict = field(default_factory=dict)


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def _read_jsonl_scenes(root: Path, name: str) -> list:
    scenes = []
    path = root / name
    if not path.exists():
        raise DataFormatError(f"missing annotation file {path}")
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            scene_id = rec["scene_id"]
            image = _load_image(root / rec["image"])
            identities = [UNLABELED if i is None else int(i) for i in rec["identities"]]
            scenes.append(AnnotatedScene(scene_id=scene_id, image=image,
                                         boxes=rec["boxes"], identities=identities))
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}:{lineno}: malformed scene record: {exc}") from exc
    return scenes


def load_native(root: Path) -> Dataset:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataFormatError(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    train = _read_jsonl_scenes(root, "train.jsonl")
    test = _read_jsonl_scenes(root, "test.jsonl")
    return Dataset(train=train, test=test, identities=list(meta.get("identities", [])),
                   meta=meta)


def _norm_xywh(box, width: int, height: int, where: str) -> list:
    x, y, w, h = [float(v) for v in box]
    if w <= 0 or h <= 0:
        raise DataFormatError(f"{where}: non-positive box size {box}")
    return [max(0.0, x / width), max(0.0, y / height),
            min(1.0, (x + w) / width), min(1.0, (y + h) / height)]


def load_cuhk_sysu(root: Path) -> Dataset:
    """CUHK-SYSU layout: Image/SSM jpegs plus MATLAB annotation structs.

    Boxes come from annotation/Images.mat ([x, y, w, h] pixels); identity
    labels from annotation/Person.mat appearances; the test image pool from
    annotation/pool.mat. Boxes not tied to a person id carry the sentinel.
    """
    from scipy.io import loadmat

    root = Path(root)
    img_dir = root / "Image" / "SSM"
    ann = root / "annotation"
    for req in [img_dir, ann / "Images.mat", ann / "Person.mat", ann / "pool.mat"]:
        if not req.exists():
            raise DataFormatError(f"missing CUHK-SYSU ingredient {req}")

    images = loadmat(ann / "Images.mat", squeeze_me=True, struct_as_record=False)["Img"]
    persons = loadmat(ann / "Person.mat", squeeze_me=True, struct_as_record=False)["Person"]
    pool = loadmat(ann / "pool.mat", squeeze_me=True)["pool"]
    test_names = {str(np.squeeze(p)) for p in np.atleast_1d(pool)}

    # (imname, rounded box) -> person index
    id_of = {}
    registry = []
    for pid, person in enumerate(np.atleast_1d(persons)):
        registry.append(pid)
        for app in np.atleast_1d(person.scene):
            loc = np.asarray(app.idlocate, dtype=np.float64).reshape(-1)[:4]
            id_of[(str(app.imname), tuple(np.round(loc).astype(int)))] = pid

    train, test = [], []
    for rec in np.atleast_1d(images):
        name = str(rec.imname)
        path = img_dir / name
        if not path.exists():
            raise DataFormatError(f"CUHK-SYSU image listed in Images.mat is missing: {path}")
        image = _load_image(path)
        height, width = image.shape[:2]
        boxes, ids = [], []
        for box in np.atleast_1d(rec.box):
            loc = np.asarray(box.idlocate, dtype=np.float64).reshape(-1)[:4]
            boxes.append(_norm_xywh(loc, width, height, f"Images.mat:{name}"))
            ids.append(id_of.get((name, tuple(np.round(loc).astype(int))), UNLABELED))
        scene = AnnotatedScene(scene_id=name, image=image, boxes=np.array(boxes).reshape(-1, 4),
                               identities=ids)
        (test if name in test_names else train).append(scene)
    return Dataset(train=train, test=test, identities=registry,
                   meta={"format": "cuhk_sysu"})


def load_prw(root: Path) -> Dataset:
    """PRW layout: frames/*.jpg with per-frame .mat boxes [id, x, y, w, h].

    frame_train.mat / frame_test.mat hold the split; identity -2 (PRW's
    unlabeled marker) maps to the sentinel.
    """
    from scipy.io import loadmat

    root = Path(root)
    frames_dir = root / "frames"
    ann_dir = root / "annotations"
    for req in [frames_dir, ann_dir, root / "frame_train.mat", root / "frame_test.mat"]:
        if not req.exists():
            raise DataFormatError(f"missing PRW ingredient {req}")

    def frame_list(path, key):
        mat = loadmat(path, squeeze_me=True)
        if key not in mat:
            raise DataFormatError(f"{path}: expected variable {key!r}")
        return [str(np.squeeze(v)) for v in np.atleast_1d(mat[key])]

    splits = {"train": frame_list(root / "frame_train.mat", "img_index_train"),
              "test": frame_list(root / "frame_test.mat", "img_index_test")}

    registry = set()
    out = {"train": [], "test": []}
    for split, names in splits.items():
        for name in names:
            img_path = frames_dir / f"{name}.jpg"
            ann_path = ann_dir / f"{name}.jpg.mat"
            if not img_path.exists() or not ann_path.exists():
                raise DataFormatError(f"PRW frame {name}: missing {img_path} or {ann_path}")
            mat = loadmat(ann_path, squeeze_me=True)
            key = next((k for k in ("box_new", "anno_file", "anno_previous") if k in mat), None)
            if key is None:
                raise DataFormatError(f"{ann_path}: no box variable found")
            ann = np.asarray(mat[key], dtype=np.float64).reshape(-1, 5)
            image = _load_image(img_path)
            height, width = image.shape[:2]
            boxes, ids = [], []
            for row in ann:
                pid = int(row[0])
                boxes.append(_norm_xywh(row[1:5], width, height, f"{ann_path}"))
                if pid < 0:
                    ids.append(UNLABELED)
                else:
                    ids.append(pid)
                    registry.add(pid)
            out[split].append(AnnotatedScene(scene_id=name, image=image,
                                             boxes=np.array(boxes).reshape(-1, 4),
                                             identities=ids))
    return Dataset(train=out["train"], test=out["test"], identities=sorted(registry),
                   meta={"format": "prw"})


def load_dataset(root: Path, format: str = "native") -> Dataset:
    loaders = {"native": load_native, "cuhk_sysu": load_cuhk_sysu, "prw": load_prw}
    if format not in loaders:
        raise ConfigError(f"unknown dataset format {format!r}")
    return loaders[format](Path(root))


def resize_scene(scene: AnnotatedScene, target: int) -> AnnotatedScene:
    """Aspect-preserving resize so the long side equals target, then pad.

    Normalized boxes are rescaled to the padded canvas.
    """
    height, width = scene.image.shape[:2]
    if height == target and width == target:
        return scene
    scale = target / max(height, width)
    new_h, new_w = max(1, round(height * scale)), max(1, round(width * scale))
    img = Image.fromarray((scene.image * 255).astype(np.uint8)).resize(
        (new_w, new_h), Image.BILINEAR)
    canvas = np.zeros((target, target, 3), dtype=np.float32)
    canvas[:new_h, :new_w] = np.asarray(img, dtype=np.float32) / 255.0
    boxes = scene.boxes.copy()
    boxes[:, [0, 2]] *= width * scale / target
    boxes[:, [1, 3]] *= height * scale / target
    return AnnotatedScene(scene_id=scene.scene_id, image=canvas,
                          boxes=boxes, identities=scene.identities.copy())


def save_native(dataset: Dataset, out_dir: Path, extra_meta: dict | None = None) -> None:
    """Write a dataset in the native JSON-lines + image-directory layout."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for split, scenes in (("train", dataset.train), ("test", dataset.test)):
        lines = []
        for scene in scenes:
            rel = f"images/{scene.scene_id}.png"
            Image.fromarray((scene.image * 255).round().astype(np.uint8)).save(out_dir / rel)
            lines.append(json.dumps({
                "scene_id": scene.scene_id,
                "image": rel,
                "boxes": [[round(float(v), 6) for v in b] for b in scene.boxes],
                "identities": [None if i == UNLABELED else int(i) for i in scene.identities],
            }))
        (out_dir / f"{split}.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"format_version": 1, "identities": list(dataset.identities)}
    meta.update(dataset.meta)
    meta.update(extra_meta or {})
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
