"""Training loop, batch assembly, and the evaluation driver.

One training step follows the forward-noising recipe end to end: sample
scenes, sample a timestep per image, duplicate ground truths to the fixed
set size, corrupt boxes and teacher embeddings, run the denoising layer,
and take a gradient step on the matched set-prediction loss.
"""

from __future__ import annotations

import json
import platform
import sys
import zlib
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, SamplerConfig, config_hash, config_to_dict
from .data import Dataset, load_dataset, resize_scene
from .denoiser import DenoisingModel
from .errors import ConfigError
from .evaluation import (EvalReport, GalleryIndex, ScenePredictions, build_queries,
                         evaluate, gallery_sweep)
from .geometry import encode_boxes
from .matching import match_and_loss
from .sampler import postprocess, run_inference
from .schedule import (DiffusionState, add_noise, build_cosine_schedule,
                       duplicate_ground_truth, normalize_embeddings,
                       pure_noise_state, sample_timestep)
from .teacher import (UNLABELED, CropEncoderTeacher, OracleTeacher, TeacherEmbedder,
                      materialize_teacher_cache, pretrain_crop_encoder)


def scene_rng(base_seed: int, scene_id: str) -> torch.Generator:
    """Deterministic per-scene generator (stable across runs and platforms)."""
    derived = (base_seed * 1000003 + zlib.crc32(scene_id.encode())) % (2**63)
    return torch.Generator().manual_seed(derived)


def build_teacher(cfg: RunConfig, train_scenes) -> TeacherEmbedder:
    if cfg.teacher.kind == "oracle":
        return OracleTeacher(cfg.diffusion.embed_dim, seed=cfg.teacher.seed)
    return pretrain_crop_encoder(train_scenes, cfg.diffusion.embed_dim,
                                 epochs=cfg.teacher.epochs, seed=cfg.teacher.seed)


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, extras: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "versions": {
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
            "diffsearch": __version__,
        },
    }
    manifest.update(extras or {})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (out_dir / "config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))


def _scene_tensors(scenes, image_size: int):
    """Resize to a common square canvas; image_size=0 keeps native sizes,
    which must then already agree across the split."""
    if image_size:
        prepared = [resize_scene(s, image_size) for s in scenes]
    else:
        shapes = {s.image.shape[:2] for s in scenes}
        if len(shapes) > 1:
            raise ConfigError(f"scenes disagree on size {sorted(shapes)}; set train.image_size")
        prepared = list(scenes)
    images = [torch.from_numpy(s.image).permute(2, 0, 1).contiguous() for s in prepared]
    return prepared, images


def _image_targets(scene, cache, cfg: RunConfig, sched, noise_rng):
    """Noisy state plus supervision tensors for one training image."""
    n_train = cfg.model.n_train
    t = sample_timestep(sched.T, noise_rng)
    m = scene.num_persons
    if m == 0:
        state = pure_noise_state(n_train, cfg.diffusion.embed_dim, t, noise_rng)
        return state, {
            "boxes": torch.zeros(0, 4), "embeds": torch.zeros(0, cfg.diffusion.embed_dim),
            "reid_mask": torch.zeros(0, dtype=torch.bool),
        }
    order = duplicate_ground_truth(list(range(m)), n_train)
    gt_boxes = torch.from_numpy(scene.boxes).float()
    gt_embeds = torch.from_numpy(
        np.stack([cache.get(scene.scene_id, j) for j in range(m)])).float()
    b0_signal = encode_boxes(gt_boxes[order], cfg.diffusion.s1)
    e0_scaled = cfg.diffusion.s2 * normalize_embeddings(gt_embeds[order])
    state = add_noise(b0_signal, e0_scaled, t, sched, noise_rng)
    reid_mask = torch.from_numpy(scene.identities != UNLABELED)
    return state, {"boxes": gt_boxes, "embeds": gt_embeds, "reid_mask": reid_mask}


def train_run(cfg: RunConfig, out_dir: Path, data_root: Path | None = None,
              dataset: Dataset | None = None, resume: Path | None = None,
              quiet: bool = True) -> Path:
    """Run the training loop; returns the path of the final checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        root = data_root or cfg.data.root
        if not root:
            raise ConfigError("no dataset: pass --data or set data.root")
        dataset = load_dataset(root, cfg.data.format)
    scenes, images = _scene_tensors(dataset.train, cfg.train.image_size)

    teacher = build_teacher(cfg, scenes)
    cache = materialize_teacher_cache(teacher, scenes)
    teacher_before = teacher.fingerprint()
    sched = build_cosine_schedule(cfg.diffusion.T)

    torch.manual_seed(cfg.seed)
    model = DenoisingModel(cfg.model, cfg.diffusion)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.train.lr,
                                  weight_decay=cfg.train.weight_decay)
    milestones = [max(1, round(f * cfg.train.iterations)) for f in cfg.train.milestones]
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones, gamma=0.1)
    data_rng = np.random.default_rng(cfg.seed)
    noise_rng = torch.Generator().manual_seed(cfg.seed + 1)
    start_iter = 0
    order: list[int] = []

    if resume is not None:
        payload = load_checkpoint(resume)
        model.load_state_dict(payload["params"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        noise_rng.set_state(payload["noise_rng"])
        data_rng.bit_generator.state = payload["data_rng"]
        order = list(payload["data_order"])
        start_iter = payload["iteration"]

    write_manifest(out_dir, "train", cfg, {"num_train_scenes": len(scenes)})
    curve_path = out_dir / "curve.jsonl"
    curve = open(curve_path, "a" if resume else "w")

    def checkpoint(path: Path, iteration: int) -> None:
        save_checkpoint(path, model, cfg, extras={
            "optimizer": optimizer.state_dict(),
            "scheduler": scheduler.state_dict(),
            "noise_rng": noise_rng.get_state(),
            "data_rng": data_rng.bit_generator.state,
            "data_order": list(order),  # unconsumed remainder of the epoch
            "iteration": iteration,
            "teacher_hash": teacher_before,
        })

    try:
        for it in range(start_iter, cfg.train.iterations):
            idxs = []
            while len(idxs) < cfg.train.batch_size:
                if not order:
                    order = list(data_rng.permutation(len(scenes)))
                idxs.append(order.pop())
            batch_images = torch.stack([images[i] for i in idxs])
            states, targets = [], []
            for i in idxs:
                state, target = _image_targets(scenes[i], cache, cfg, sched, noise_rng)
                states.append(state)
                targets.append(target)
            boxes_t = torch.stack([s.boxes for s in states])
            embeds_t = torch.stack([s.embeds for s in states])
            t_batch = torch.tensor([s.t for s in states], dtype=torch.float32)

            cond = model.extract_condition(batch_images)
            out = model.denoise_batch(cond, boxes_t, embeds_t, t_batch)
            totals, logged = [], {"cls": 0.0, "l1": 0.0, "giou": 0.0, "reid": 0.0}
            for b, target in enumerate(targets):
                breakdown, _ = match_and_loss(
                    out["boxes"][b], out["logits"][b], out["embeds"][b],
                    target["boxes"], target["embeds"], target["reid_mask"], cfg.loss)
                totals.append(breakdown.total)
                for key in logged:
                    logged[key] += float(getattr(breakdown, key).detach()) / len(targets)
            loss = torch.stack(totals).mean()

            if not torch.isfinite(loss):
                dump = out_dir / "diagnostic.pt"
                torch.save({"iteration": it, "scene_indices": idxs,
                            "boxes_t": boxes_t, "embeds_t": embeds_t,
                            "t": t_batch, "out": {k: v.detach() for k, v in out.items()},
                            "config": config_to_dict(cfg)}, dump)
                raise RuntimeError(f"non-finite loss at iteration {it}; batch dumped to {dump}")

            optimizer.zero_grad()
            loss.backward()
            if cfg.train.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
            optimizer.step()
            scheduler.step()

            if (it + 1) % cfg.train.log_every == 0 or it == start_iter:
                record = {"iteration": it + 1, "loss": float(loss.detach()),
                          "lr": scheduler.get_last_lr()[0], **logged}
                curve.write(json.dumps(record) + "\n")
                curve.flush()
                if not quiet:
                    print(f"iter {it + 1}/{cfg.train.iterations} loss {float(loss):.4f}")
            if cfg.train.checkpoint_every and (it + 1) % cfg.train.checkpoint_every == 0:
                checkpoint(out_dir / f"ckpt_{it + 1:06d}.pt", it + 1)
    finally:
        curve.close()

    if teacher.fingerprint() != teacher_before:
        raise RuntimeError("teacher parameters changed during training")
    final = out_dir / "final.pt"
    checkpoint(final, cfg.train.iterations)
    return final


def predict_scenes(model: DenoisingModel, sched, scenes, sampler_cfg: SamplerConfig,
                   seed: int, keep_trajectory: bool = False):
    """Run inference over scenes with per-scene deterministic generators."""
    model.eval()
    predictions, trajectories = {}, {}
    for scene in scenes:
        image = torch.from_numpy(scene.image).permute(2, 0, 1).float()
        rng = scene_rng(seed, scene.scene_id)
        pred, traj = run_inference(image, model, sched, sampler_cfg, rng)
        final = postprocess(pred, sampler_cfg.score_thresh, sampler_cfg.nms_iou,
                            sampler_cfg.nms)
        predictions[scene.scene_id] = ScenePredictions.from_prediction_set(final)
        if keep_trajectory:
            trajectories[scene.scene_id] = traj
    return predictions, trajectories


def evaluate_model(model: DenoisingModel, sched, test_scenes, cfg: RunConfig,
                   steps: int | None = None, seed: int | None = None,
                   per_step: bool = False, gallery_sizes=()) -> EvalReport:
    """Full person-search evaluation of one checkpoint at one step count."""
    sampler_cfg = cfg.sampler
    if steps is not None:
        sampler_cfg = SamplerConfig(steps=steps, eta=cfg.sampler.eta,
                                    renewal=cfg.sampler.renewal,
                                    renewal_thresh=cfg.sampler.renewal_thresh,
                                    score_thresh=cfg.sampler.score_thresh,
                                    nms_iou=cfg.sampler.nms_iou, nms=cfg.sampler.nms)
    seed = cfg.seed if seed is None else seed
    test_scenes, _ = _scene_tensors(test_scenes, cfg.train.image_size)
    predictions, trajectories = predict_scenes(model, sched, test_scenes, sampler_cfg,
                                               seed, keep_trajectory=per_step)
    annotations = {s.scene_id: (s.boxes, s.identities) for s in test_scenes}
    index = GalleryIndex(predictions=predictions, annotations=annotations)
    queries = build_queries(test_scenes, index)
    report = evaluate(queries, index, ks=cfg.eval.cmc_ks)

    if per_step:
        report.per_step = {}
        for k in range(sampler_cfg.steps):
            step_preds = {}
            for scene in test_scenes:
                snap = trajectories[scene.scene_id].snapshots[k]
                final = postprocess(snap, sampler_cfg.score_thresh,
                                    sampler_cfg.nms_iou, sampler_cfg.nms)
                step_preds[scene.scene_id] = ScenePredictions.from_prediction_set(final)
            step_index = GalleryIndex(predictions=step_preds, annotations=annotations)
            step_queries = build_queries(test_scenes, step_index)
            step_report = evaluate(step_queries, step_index, ks=cfg.eval.cmc_ks)
            report.per_step[k + 1] = {"map": step_report.map, "map50": step_report.map50,
                                      "cmc1": step_report.cmc.get(1, 0.0)}
    if gallery_sizes:
        sweep = gallery_sweep(queries, index, list(gallery_sizes), ks=cfg.eval.cmc_ks,
                              seed=seed)
        report.per_gallery_size = {
            size: {"map": rep.map, "map50": rep.map50, "cmc1": rep.cmc.get(1, 0.0)}
            for size, rep in sweep.items()}
    return report
