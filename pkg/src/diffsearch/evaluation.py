"""Person-search evaluation: CMC, person-search mAP, detection mAP50.

Protocol: every annotated identity instance in the test split is a query;
its gallery is every other test scene. Gallery proposals are ranked by
cosine similarity to the query embedding; a proposal is a true positive
iff it overlaps an unclaimed same-identity ground truth at IoU > 0.5.
Queries whose identity never appears in the gallery are skipped; queries
where no proposal overlaps the query box count as retrieval failures with
AP 0.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .teacher import UNLABELED

IOU_POSITIVE = 0.5  # a match must exceed this overlap


@dataclass
class ScenePredictions:
    boxes: np.ndarray  # (n, 4)
    scores: np.ndarray  # (n,)
    embeds: np.ndarray  # (n, D) unit rows

    @classmethod
    def from_prediction_set(cls, pred) -> "ScenePredictions":
        return cls(boxes=pred.boxes.detach().cpu().numpy().astype(np.float64),
                   scores=pred.scores.detach().cpu().numpy().astype(np.float64),
                   embeds=pred.embeds.detach().cpu().numpy().astype(np.float64))


@dataclass
class Query:
    scene_id: str
    box: np.ndarray
    identity: int
    embedding: np.ndarray | None = None
    failed: bool = False


@dataclass
class GalleryIndex:
    """Predictions and annotations for every test scene."""

    predictions: dict  # scene_id -> ScenePredictions
    annotations: dict  # scene_id -> (gt_boxes (m, 4), gt_ids (m,))

    def scene_ids(self) -> list:
        return sorted(self.predictions.keys())


@dataclass
class EvalReport:
    map: float
    cmc: dict
    map50: float
    num_queries: int
    num_failed: int = 0
    num_skipped: int = 0
    per_step: dict | None = None
    per_gallery_size: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "map": self.map,
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "map50": self.map50,
            "num_queries": self.num_queries,
            "num_failed": self.num_failed,
            "num_skipped": self.num_skipped,
        }
        if self.per_step is not None:
            out["per_step"] = {str(k): v for k, v in self.per_step.items()}
        if self.per_gallery_size is not None:
            out["per_gallery_size"] = {str(k): v for k, v in self.per_gallery_size.items()}
        return out


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clip(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = ((a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])).clip(min=0)
    area_b = ((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])).clip(min=0)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def select_query_embedding(preds: ScenePredictions, query_box: np.ndarray):
    """Embedding of the proposal best overlapping the query box.

    Returns None when the best IoU falls below 0.5 (retrieval failure).
    Ties resolve to the lowest proposal index.
    """
    if len(preds.boxes) == 0:
        return None
    ious = _iou_matrix(np.asarray(query_box, dtype=np.float64)[None, :], preds.boxes)[0]
    best = int(np.argmax(ious))  # argmax takes the first maximum
    if ious[best] < IOU_POSITIVE:
        return None
    return preds.embeds[best]


def query_embedding(model, sched, sampler_cfg, scene, query_box, rng):
    """Run inference on the query scene and select the matching proposal."""
    import torch

    from .sampler import postprocess, run_inference

    image = torch.from_numpy(scene.image).permute(2, 0, 1).float()
    pred, _ = run_inference(image, model, sched, sampler_cfg, rng)
    pred = postprocess(pred, sampler_cfg.score_thresh, sampler_cfg.nms_iou, sampler_cfg.nms)
    return select_query_embedding(ScenePredictions.from_prediction_set(pred), query_box)


def _ranked_hits(query: Query, index: GalleryIndex, scene_ids: list):
    """Rank gallery proposals by similarity; greedily mark true positives.

    Returns (hit_flags in rank order, num_gt).
    """
    sims, keys = [], []
    for sid in scene_ids:
        preds = index.predictions[sid]
        for j in range(len(preds.boxes)):
            sims.append(float(preds.embeds[j] @ query.embedding))
            keys.append((sid, j))
    num_gt = 0
    gt_of_scene = {}
    for sid in scene_ids:
        boxes, ids = index.annotations[sid]
        mask = np.asarray(ids) == query.identity
        gt_of_scene[sid] = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[mask]
        num_gt += int(mask.sum())
    if num_gt == 0:
        return None, 0

    order = np.argsort(-np.asarray(sims), kind="stable")
    claimed = {sid: np.zeros(len(gt_of_scene[sid]), dtype=bool) for sid in scene_ids}
    hits = np.zeros(len(order), dtype=bool)
    for rank, pos in enumerate(order):
        sid, j = keys[pos]
        gts = gt_of_scene[sid]
        if len(gts) == 0:
            continue
        ious = _iou_matrix(index.predictions[sid].boxes[j][None, :], gts)[0]
        ious = np.where(claimed[sid], -1.0, ious)
        best = int(np.argmax(ious))
        if ious[best] > IOU_POSITIVE:
            claimed[sid][best] = True
            hits[rank] = True
    return hits, num_gt


def search_ap(query: Query, index: GalleryIndex, scene_ids: list | None = None) -> float | None:
    """Average precision of retrieving one query from the gallery.

    Returns None when the query identity is absent from the gallery.
    """
    if scene_ids is None:
        scene_ids = [s for s in index.scene_ids() if s != query.scene_id]
    hits, num_gt = _ranked_hits(query, index, scene_ids)
    if num_gt == 0:
        return None
    tp = np.cumsum(hits)
    precision = tp / (np.arange(len(hits)) + 1)
    return float((precision * hits).sum() / num_gt)


def detection_map50(index: GalleryIndex, scene_ids: list | None = None) -> float:
    """Identity-agnostic detection AP at IoU 0.5, all-points interpolation."""
    if scene_ids is None:
        scene_ids = index.scene_ids()
    records = []  # (-score, order, scene, j)
    num_gt = 0
    for sid in scene_ids:
        boxes, _ = index.annotations[sid]
        num_gt += len(np.asarray(boxes).reshape(-1, 4))
        preds = index.predictions[sid]
        for j in range(len(preds.boxes)):
            records.append((-preds.scores[j], len(records), sid, j))
    if num_gt == 0 or not records:
        return 0.0
    records.sort()
    claimed = {sid: np.zeros(len(np.asarray(index.annotations[sid][0]).reshape(-1, 4)),
                             dtype=bool) for sid in scene_ids}
    tp = np.zeros(len(records))
    for k, (_, _, sid, j) in enumerate(records):
        gts = np.asarray(index.annotations[sid][0], dtype=np.float64).reshape(-1, 4)
        if len(gts) == 0:
            continue
        ious = _iou_matrix(index.predictions[sid].boxes[j][None, :], gts)[0]
        ious = np.where(claimed[sid], -1.0, ious)
        best = int(np.argmax(ious))
        if ious[best] > IOU_POSITIVE:
            claimed[sid][best] = True
            tp[k] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / num_gt
    precision = cum_tp / (np.arange(len(records)) + 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]).sum())


def evaluate(queries: list, index: GalleryIndex, ks=(1, 5, 10),
             scene_subsets: dict | None = None) -> EvalReport:
    """Aggregate AP over queries into mAP and CMC@k, plus detection mAP50.

    scene_subsets optionally maps query position to its gallery scene ids
    (used by the gallery-size sweep); otherwise each query searches every
    other scene.
    """
    aps, cmc_hits = [], {k: [] for k in ks}
    failed = skipped = 0
    for qi, query in enumerate(queries):
        if scene_subsets is not None:
            scene_ids = scene_subsets[qi]
        else:
            scene_ids = [s for s in index.scene_ids() if s != query.scene_id]
        gallery_gt = sum(int((np.asarray(index.annotations[s][1]) == query.identity).sum())
                         for s in scene_ids)
        if gallery_gt == 0:
            warnings.warn(f"query {query.scene_id}/{query.identity} absent from gallery; skipped")
            skipped += 1
            continue
        if query.failed or query.embedding is None:
            failed += 1
            aps.append(0.0)
            for k in ks:
                cmc_hits[k].append(0.0)
            continue
        hits, num_gt = _ranked_hits(query, index, scene_ids)
        tp = np.cumsum(hits)
        precision = tp / (np.arange(len(hits)) + 1)
        aps.append(float((precision * hits).sum() / num_gt))
        for k in ks:
            cmc_hits[k].append(1.0 if hits[:k].any() else 0.0)
    map_score = float(np.mean(aps)) if aps else 0.0
    cmc = {k: (float(np.mean(v)) if v else 0.0) for k, v in cmc_hits.items()}
    return EvalReport(map=map_score, cmc=cmc, map50=detection_map50(index),
                      num_queries=len(aps), num_failed=failed, num_skipped=skipped)


def gallery_sweep(queries: list, index: GalleryIndex, sizes: list, ks=(1, 5, 10),
                  seed: int = 0) -> dict:
    """Evaluate under per-query galleries of increasing size.

    Each query keeps the scenes that contain its identity and pads with
    seeded distractor scenes up to the requested size.
    """
    all_scenes = index.scene_ids()
    reports = {}
    for size in sizes:
        if size > len(all_scenes) - 1:
            raise ConfigError(f"gallery size {size} exceeds {len(all_scenes) - 1} scenes")
        rng = np.random.default_rng(seed + size)
        subsets = {}
        for qi, query in enumerate(queries):
            positives, others = [], []
            for sid in all_scenes:
                if sid == query.scene_id:
                    continue
                _, ids = index.annotations[sid]
                (positives if (np.asarray(ids) == query.identity).any() else others).append(sid)
            need = max(0, size - len(positives))
            chosen = list(rng.choice(others, size=min(need, len(others)), replace=False))
            subsets[qi] = sorted(positives + chosen)
        report = evaluate(queries, index, ks, scene_subsets=subsets)
        reports[int(size)] = report
    return reports


def build_queries(scenes, index: GalleryIndex) -> list:
    """One query per labeled ground-truth instance, embedding selected from
    the scene's own predictions."""
    queries = []
    for scene in scenes:
        for box, ident in zip(scene.boxes, scene.identities):
            if ident == UNLABELED:
                continue
            emb = select_query_embedding(index.predictions[scene.scene_id],
                                         np.asarray(box))
            queries.append(Query(scene_id=scene.scene_id, box=np.asarray(box),
                                 identity=int(ident), embedding=emb,
                                 failed=emb is None))
    return queries


def save_report(report: EvalReport, out_dir: Path, stem: str = "report") -> None:
    """Emit JSON, a flat CSV, and line plots for the available breakdowns."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))

    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["map", report.map])
        writer.writerow(["map50", report.map50])
        for k in sorted(report.cmc):
            writer.writerow([f"cmc@{k}", report.cmc[k]])
        writer.writerow(["num_queries", report.num_queries])
        writer.writerow(["num_failed", report.num_failed])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for name, breakdown, xlabel in (("step", report.per_step, "inference steps"),
                                    ("gallery", report.per_gallery_size, "gallery size")):
        if not breakdown:
            continue
        xs = sorted(breakdown)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for metric in ("map", "map50", "cmc1"):
            ys = [breakdown[x].get(metric) for x in xs]
            if all(y is not None for y in ys):
                ax.plot(xs, ys, marker="o", label=metric)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("metric")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / f"{stem}_vs_{name}.png", dpi=120)
        plt.close(fig)
