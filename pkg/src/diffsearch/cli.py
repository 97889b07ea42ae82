"""Command-line entry point.

Subcommands: synth (generate the synthetic benchmark), train, infer
(trajectory dumps), eval (metrics, optional gallery sweep), sweep
(inference-step sweep on one checkpoint), ablate (interaction/cascade
switch matrix). Exit codes: 0 ok, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from .checkpoint import model_from_checkpoint
from .config import RunConfig, load_config, replace_section
from .data import load_dataset, save_native
from .errors import ConfigError, DataFormatError
from .evaluation import save_report
from .schedule import build_cosine_schedule
from .synth import generate_synthetic, signature_accuracy
from .training import evaluate_model, predict_scenes, train_run, write_manifest


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_config_args(p):
    p.add_argument("--config", type=Path, default=None, help="YAML/JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override, repeatable")


def _build_parser() -> _Parser:
    parser = _Parser(prog="diffsearch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None)
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("infer", help="run inference and dump trajectories")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--renewal", action="store_true")
    p.add_argument("--score-thresh", type=float, default=None)
    p.add_argument("--nms-iou", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--gallery-sizes", type=str, default="")
    p.add_argument("--per-step", action="store_true")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("sweep", help="evaluate one checkpoint at several step counts")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps-list", type=str, default="1,2,4,8")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("ablate", help="train and evaluate the switch matrix")
    _add_config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=str, default="0,1,2")
    p.add_argument("--arms", type=str,
                   default="full,parallel,no_sa,no_dc,no_ca")
    return parser


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _cmd_synth(args) -> int:
    cfg = load_config(args.config, args.overrides)
    dataset, palette = generate_synthetic(cfg.synth)
    accuracy = signature_accuracy(dataset.train + dataset.test, palette)
    save_native(dataset, args.out, extra_meta={
        "learnability_accuracy": accuracy,
        "synth_spec": dataclasses.asdict(cfg.synth),
    })
    write_manifest(args.out, "synth", cfg, {"learnability_accuracy": accuracy})
    print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test scenes to {args.out}")
    print(f"learnability (nearest-signature identity accuracy): {accuracy:.4f}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    final = train_run(cfg, args.out, data_root=args.data, resume=args.resume,
                      quiet=not args.verbose)
    print(f"final checkpoint: {final}")
    return 0


def _sampler_overrides(cfg: RunConfig, args) -> RunConfig:
    kwargs = {}
    for name, attr in [("steps", "steps"), ("eta", "eta"),
                       ("score_thresh", "score_thresh"), ("nms_iou", "nms_iou")]:
        value = getattr(args, attr, None)
        if value is not None:
            kwargs[name] = value
    if getattr(args, "renewal", False):
        kwargs["renewal"] = True
    if kwargs:
        cfg = replace_section(cfg, sampler=dataclasses.replace(cfg.sampler, **kwargs))
    return cfg


def _cmd_infer(args) -> int:
    model, cfg, _ = model_from_checkpoint(args.ckpt)
    cfg = _sampler_overrides(cfg, args)
    dataset = load_dataset(args.data, cfg.data.format)
    sched = build_cosine_schedule(cfg.diffusion.T)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    predictions, trajectories = predict_scenes(
        model, sched, dataset.test, cfg.sampler, seed, keep_trajectory=True)
    with open(out / "trajectory.jsonl", "w") as fh:
        for scene in dataset.test:
            for record in trajectories[scene.scene_id].to_records(scene.scene_id):
                fh.write(json.dumps(record) + "\n")
    summary = {sid: {"boxes": p.boxes.tolist(), "scores": p.scores.tolist()}
               for sid, p in predictions.items()}
    (out / "predictions.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    write_manifest(out, "infer", cfg, {"checkpoint": str(args.ckpt), "eval_seed": seed})
    print(f"wrote trajectories for {len(predictions)} scenes to {out}")
    return 0


def _cmd_eval(args) -> int:
    model, cfg, _ = model_from_checkpoint(args.ckpt)
    dataset = load_dataset(args.data, cfg.data.format)
    sched = build_cosine_schedule(cfg.diffusion.T)
    seed = cfg.seed if args.seed is None else args.seed
    report = evaluate_model(model, sched, dataset.test, cfg, steps=args.steps,
                            seed=seed, per_step=args.per_step,
                            gallery_sizes=_ints(args.gallery_sizes))
    save_report(report, args.out)
    write_manifest(args.out, "eval", cfg, {"checkpoint": str(args.ckpt), "eval_seed": seed})
    print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return 0


def _cmd_sweep(args) -> int:
    model, cfg, _ = model_from_checkpoint(args.ckpt)
    dataset = load_dataset(args.data, cfg.data.format)
    sched = build_cosine_schedule(cfg.diffusion.T)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for steps in _ints(args.steps_list):
        report = evaluate_model(model, sched, dataset.test, cfg, steps=steps, seed=seed)
        summary[steps] = {"map": report.map, "map50": report.map50,
                          "cmc1": report.cmc.get(1, 0.0)}
        save_report(report, out, stem=f"report_steps{steps}")
    (out / "sweep.json").write_text(json.dumps(
        {str(k): v for k, v in summary.items()}, indent=1, sort_keys=True))
    write_manifest(out, "sweep", cfg, {"checkpoint": str(args.ckpt), "eval_seed": seed})
    print(json.dumps({str(k): v for k, v in summary.items()}, indent=1, sort_keys=True))
    return 0


ABLATION_ARMS = {
    "full": {},
    "parallel": {"cascaded": False},
    "no_sa": {"use_self_attention": False},
    "no_dc": {"use_dynamic_conv": False},
    "no_ca": {"use_cross_attention": False},
}


def _cmd_ablate(args) -> int:
    base = load_config(args.config, args.overrides)
    dataset = load_dataset(args.data, base.data.format)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    unknown = [a for a in arms if a not in ABLATION_ARMS]
    if unknown:
        raise ConfigError(f"unknown ablation arms {unknown}; pick from {sorted(ABLATION_ARMS)}")
    results = {}
    for arm in arms:
        results[arm] = {}
        for seed in _ints(args.seeds):
            cfg = replace_section(base, seed=seed,
                                  model=dataclasses.replace(base.model, **ABLATION_ARMS[arm]))
            run_dir = out / f"{arm}_seed{seed}"
            final = train_run(cfg, run_dir, dataset=dataset)
            model, cfg_loaded, _ = model_from_checkpoint(final)
            sched = build_cosine_schedule(cfg_loaded.diffusion.T)
            report = evaluate_model(model, sched, dataset.test, cfg_loaded, seed=seed)
            results[arm][f"seed{seed}"] = {"map": report.map, "map50": report.map50,
                                           "cmc1": report.cmc.get(1, 0.0)}
        per_seed = list(results[arm].values())
        results[arm]["mean"] = {k: float(np.mean([entry[k] for entry in per_seed]))
                                for k in ("map", "map50", "cmc1")}
    (out / "ablation.json").write_text(json.dumps(results, indent=1, sort_keys=True, default=str))
    write_manifest(out, "ablate", base, {"arms": arms})
    print(json.dumps(results, indent=1, sort_keys=True, default=str))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
