from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest
import torch

from diffsearch.checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from diffsearch.config import RunConfig, replace_section
from diffsearch.schedule import build_cosine_schedule
from diffsearch.training import evaluate_model, train_run

from .conftest import micro_run_config


def _curve(out_dir):
    lines = (out_dir / "curve.jsonl").read_text().splitlines()
    return [json.loads(line) for line in lines]


def test_micro_training_decreases_loss(tiny_dataset, tmp_path):
    dataset, _, _ = tiny_dataset
    first_losses, last_losses = [], []
    for seed in range(3):
        cfg = micro_run_config(seed=seed)
        cfg = replace_section(cfg, train=dataclasses.replace(cfg.train, iterations=50,
                                                             log_every=1))
        train_run(cfg, tmp_path / f"run{seed}", dataset=dataset)
        curve = _curve(tmp_path / f"run{seed}")
        first_losses.append(curve[0]["loss"])
        last_losses.append(curve[-1]["loss"])
    assert np.mean(last_losses) < np.mean(first_losses)


def test_checkpoint_bit_exact_round_trip(tiny_dataset, tmp_path):
    dataset, _, _ = tiny_dataset
    cfg = micro_run_config()
    final = train_run(cfg, tmp_path / "run", dataset=dataset)
    model, cfg_loaded, payload = model_from_checkpoint(final)
    header = payload["header"]
    assert header["config_hash"]
    assert header["schedule"]["T"] == cfg.diffusion.T
    # saving the loaded model again reproduces identical parameter bytes
    save_checkpoint(tmp_path / "again.pt", model, cfg_loaded)
    again = load_checkpoint(tmp_path / "again.pt")
    for name, tensor in payload["params"].items():
        assert torch.equal(tensor, again["params"][name]), name
        assert header["param_shapes"][name] == list(tensor.shape)


def test_resume_continues_trajectory(tiny_dataset, tmp_path):
    dataset, _, _ = tiny_dataset
    cfg = micro_run_config()
    cfg = replace_section(cfg, train=dataclasses.replace(
        cfg.train, iterations=20, checkpoint_every=10, log_every=1))
    train_run(cfg, tmp_path / "full", dataset=dataset)
    full_curve = _curve(tmp_path / "full")

    # restart the tail from the mid checkpoint in a fresh directory
    resumed_final = train_run(cfg, tmp_path / "resumed", dataset=dataset,
                              resume=tmp_path / "full" / "ckpt_000010.pt")
    assert resumed_final.exists()
    resumed_by_iter = {r["iteration"]: r["loss"] for r in _curve(tmp_path / "resumed")}
    full_by_iter = {r["iteration"]: r["loss"] for r in full_curve}
    for it in range(11, 21):
        assert resumed_by_iter[it] == pytest.approx(full_by_iter[it], rel=1e-5), it


def test_full_run_determinism(tiny_dataset, tmp_path):
    dataset, _, _ = tiny_dataset
    reports = []
    for name in ("a", "b"):
        cfg = micro_run_config(seed=123)
        final = train_run(cfg, tmp_path / name, dataset=dataset)
        model, cfg_loaded, _ = model_from_checkpoint(final)
        sched = build_cosine_schedule(cfg_loaded.diffusion.T)
        report = evaluate_model(model, sched, dataset.test, cfg_loaded, steps=2)
        reports.append(report.to_dict())
    assert reports[0] == reports[1]


def test_reid_weight_zero_reports_zero(tiny_dataset, tmp_path):
    dataset, _, _ = tiny_dataset
    cfg = micro_run_config()
    cfg = replace_section(cfg, loss=dataclasses.replace(cfg.loss, reid=0.0))
    cfg = replace_section(cfg, train=dataclasses.replace(cfg.train, iterations=5,
                                                         log_every=1))
    train_run(cfg, tmp_path / "run", dataset=dataset)
    for record in _curve(tmp_path / "run"):
        assert record["reid"] == 0.0


def test_nonfinite_loss_aborts_with_dump(tiny_dataset, tmp_path, monkeypatch):
    dataset, _, _ = tiny_dataset
    cfg = micro_run_config()

    import diffsearch.training as training_mod
    real = training_mod.match_and_loss

    def poisoned(*args, **kwargs):
        breakdown, match = real(*args, **kwargs)
        breakdown.total = breakdown.total * float("nan")
        return breakdown, match

    monkeypatch.setattr(training_mod, "match_and_loss", poisoned)
    with pytest.raises(RuntimeError, match="non-finite"):
        train_run(cfg, tmp_path / "run", dataset=dataset)
    assert (tmp_path / "run" / "diagnostic.pt").exists()


def test_manifest_written(tiny_dataset, tmp_path):
    dataset, _, _ = tiny_dataset
    cfg = micro_run_config()
    train_run(cfg, tmp_path / "run", dataset=dataset)
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config_hash"]
    assert "torch" in manifest["versions"]
    assert (tmp_path / "run" / "config.json").exists()


def test_teacher_hash_recorded(tiny_dataset, tmp_path):
    dataset, _, _ = tiny_dataset
    cfg = micro_run_config()
    final = train_run(cfg, tmp_path / "run", dataset=dataset)
    payload = load_checkpoint(final)
    assert isinstance(payload["teacher_hash"], str) and payload["teacher_hash"]


def test_evaluate_model_per_step_and_sweep(tiny_dataset, tmp_path):
    dataset, _, _ = tiny_dataset
    cfg = micro_run_config()
    final = train_run(cfg, tmp_path / "run", dataset=dataset)
    model, cfg_loaded, _ = model_from_checkpoint(final)
    sched = build_cosine_schedule(cfg_loaded.diffusion.T)
    report = evaluate_model(model, sched, dataset.test, cfg_loaded, steps=2,
                            per_step=True, gallery_sizes=(2, 4))
    assert set(report.per_step) == {1, 2}
    assert set(report.per_gallery_size) == {2, 4}
    for entry in report.per_step.values():
        assert 0.0 <= entry["map"] <= 1.0
