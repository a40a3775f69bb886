"""Command line entry point: ``odgi generate|train|eval|sweep|budget``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .evaluation import SWEEP_TAU_HIGH, SWEEP_TAU_LOW, SWEEP_TAU_NMS, evaluate_pipeline, hyperparameter_sweep
from .pipeline import PipelineConfig, StageConfig, box_budget, pixel_budget, write_detections_jsonl
from .synthdata import OracleConfig, SceneGenConfig, generate_scene, oracle_stages, read_dataset, render_scene, write_dataset
from .training import (
    ToyPredictor,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    restore_two_stage,
    save_checkpoint,
    stage_examples,
    train_stage,
    train_two_stage,
    write_trace_csv,
)
from .transition import Ablation, TransitionConfig
from .validation import check_resolutions, parse_float_list, parse_int_list

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


def worker_count() -> int:
    """Worker cap from ``ODGI_THREADS`` (default 1)."""
    raw = os.environ.get("ODGI_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ODGI_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("ODGI_THREADS must be at least 1")
    return n


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_manifest(out_dir: Path, command: str, config: dict, seeds: dict, outputs: list[str]):
    """Record what is about to run; written before any long computation."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "versions": {"odgi": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": sorted(outputs),
    }
    (out_dir / MANIFEST).write_text(_dump(manifest))
    return manifest


def _args_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


# -- generate ----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg_dict = {}
    if args.config:
        cfg_dict = json.loads(Path(args.config).read_text())
        if not isinstance(cfg_dict, dict):
            raise ConfigError("scene config must be a JSON object")
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.count < 0:
        raise ConfigError("--count must be nonnegative")
    try:
        cfg = SceneGenConfig.from_dict(cfg_dict)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    outputs = ["annotations.jsonl"] + ([] if args.no_images else ["images/"])
    write_manifest(out, "generate", {"scene": cfg.to_dict(), "count": args.count, "images": not args.no_images},
                   {"seed": cfg.seed}, outputs)
    with ThreadPoolExecutor(worker_count()) as pool:
        scenes = list(pool.map(lambda k: generate_scene(cfg, k), range(args.count)))
        images = None
        if not args.no_images:
            images = list(pool.map(lambda k: render_scene(scenes[k], cfg.seed, k, cfg.image_size_px), range(args.count)))
    write_dataset(out, scenes, images)
    print(_dump({"count": len(scenes), "out": str(out)}), end="")
    return EXIT_OK


# -- train -------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        lr_decay=args.lr_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        delay_epochs=args.delay,
        queue_capacity=args.queue,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    res = check_resolutions(parse_int_list(args.res))
    if len(res) != args.stages:
        raise ConfigError(f"--stages {args.stages} needs {args.stages} resolutions, got {len(res)}")
    if args.stages not in (1, 2):
        raise ConfigError("training supports one or two stages")
    tc = _train_config(args)
    out = Path(args.out)
    config = {"stages": args.stages, "res": list(res), "train": {k: getattr(tc, k) for k in tc.__dataclass_fields__},
              "pool": args.pool, "context": args.context, "data": args.data, "resume": args.resume}
    write_manifest(out, "train", config, {"seed": tc.seed}, ["checkpoint.json", "loss.csv"])
    scenes, images = read_dataset(args.data)
    if images is None or any(im is None for im in images):
        raise ConfigError("training needs rendered images in the dataset")
    ckpt = out / "checkpoint.json"

    if args.stages == 1:
        p = ToyPredictor(res[0], args.pool, args.context, final_stage=True)
        trace = []
        train_stage(p, stage_examples(p, images, scenes, tc.delta), tc, trace)
        rows = [(e, 1, v, float("nan"), float("nan"), float("nan"), len(scenes)) for e, v in enumerate(trace)]
        save_checkpoint(ckpt, predictors=[p], config=tc, epoch=tc.epochs, trace=rows)
        write_trace_csv(out / "loss.csv", rows)
        print(_dump({"epochs": tc.epochs, "final_loss": trace[-1] if trace else None}), end="")
        return EXIT_OK

    if args.resume:
        doc = load_checkpoint(args.resume)
        state = restore_two_stage(doc, tc)
        s1, s2 = state.stage1, state.stage2
        if [s1.resolution_px, s2.resolution_px] != list(res):
            raise ConfigError("checkpoint resolutions do not match --res")
    else:
        state = None
        s1 = ToyPredictor(res[0], args.pool, args.context)
        s2 = ToyPredictor(res[1], args.pool, args.context, final_stage=True)

    def on_epoch(st):
        save_checkpoint(ckpt, st, config=tc)
        write_trace_csv(out / "loss.csv", st.trace)

    state = train_two_stage(s1, s2, images, scenes, tc, state=state, on_epoch=on_epoch)
    save_checkpoint(ckpt, state, config=tc)
    write_trace_csv(out / "loss.csv", state.trace)
    last = {stage: row[2] for row in state.trace for stage in [row[1]]}
    print(_dump({"epochs": state.epoch, "final_loss": {str(k): v for k, v in sorted(last.items())}}), end="")
    return EXIT_OK


# -- eval / sweep --------------------------------------------------------------


def _detectors(args, res):
    if bool(args.ckpt) == bool(args.oracle):
        raise ConfigError("give exactly one of --ckpt or --oracle")
    if args.ckpt:
        preds = load_checkpoint(args.ckpt)["predictors"]
        got = [p.resolution_px for p in preds]
        if got != list(res):
            raise ConfigError(f"checkpoint resolutions {got} do not match --res {list(res)}")
        return preds
    cfg = OracleConfig(
        kind=args.oracle,
        sigma=args.sigma,
        p_drop=args.p_drop,
        p_spurious=args.p_spurious,
        area_threshold_px=args.area_threshold,
        seed=args.seed,
    )
    return oracle_stages(res, cfg)


def _pipeline(args, res) -> PipelineConfig:
    t = TransitionConfig(args.tau_low, args.tau_high, args.tau_nms, args.gamma)
    stages = [StageConfig(r, t) for r in res[:-1]] + [StageConfig(res[-1])]
    return PipelineConfig(tuple(stages), args.final_nms, Ablation.parse(args.ablation))


def _load_eval_data(args, detectors):
    need_pixels = any(getattr(d, "needs_pixels", True) for d in detectors)
    scenes, images = read_dataset(args.data, load_images=need_pixels)
    if need_pixels and (images is None or any(im is None for im in images)):
        raise ConfigError("these detectors need rendered images in the dataset")
    return scenes, images


def cmd_eval(args) -> int:
    res = check_resolutions(parse_int_list(args.res))
    thresholds = parse_float_list(args.iou)
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ConfigError("--iou thresholds must lie in (0, 1)")
    cfg = _pipeline(args, res)
    out = Path(args.out) if args.out else None
    detectors = _detectors(args, res)
    if out is not None:
        write_manifest(out, "eval", _args_config(args), {"seed": args.seed},
                       ["metrics.json", "metrics.csv", "detections.jsonl"])
    scenes, images = _load_eval_data(args, detectors)
    maps, dets, reports = evaluate_pipeline(images, scenes, detectors, cfg, thresholds)
    report = {
        "ablation": str(cfg.ablation),
        "resolutions": list(res),
        "map": {f"{t:g}": maps[t] for t in thresholds},
        "max_boxes": box_budget(cfg),
        "pixels": pixel_budget(cfg),
        "mean_boxes_used": float(np.mean([r.boxes_used for r in reports])) if reports else 0.0,
        "max_boxes_used": max((r.boxes_used for r in reports), default=0),
        "mean_pixels_used": float(np.mean([r.pixels_used for r in reports])) if reports else 0.0,
        "images": len(scenes),
        "detections": len(dets),
    }
    if out is not None:
        (out / "metrics.json").write_text(_dump(report))
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iou", "map", "max_boxes", "pixels", "mean_boxes_used", "mean_pixels_used"])
            for t in thresholds:
                w.writerow([f"{t:g}", repr(maps[t]), report["max_boxes"], report["pixels"],
                            repr(report["mean_boxes_used"]), repr(report["mean_pixels_used"])])
        write_detections_jsonl(out / "detections.jsonl", dets)
    print(_dump(report), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    res = check_resolutions(parse_int_list(args.res))
    if len(res) < 2:
        raise ConfigError("a sweep needs at least two stages")
    if args.grid_from_paper:
        lows, highs, nmss = SWEEP_TAU_LOW, SWEEP_TAU_HIGH, SWEEP_TAU_NMS
    else:
        lows, highs, nmss = (parse_float_list(v) for v in (args.tau_lows, args.tau_highs, args.tau_nmss))
    gammas = parse_int_list(args.gammas)
    if not (lows and highs and nmss and gammas):
        raise ConfigError("every sweep range needs at least one value")
    base = _pipeline(args, res)
    detectors = _detectors(args, res)
    out = Path(args.out)
    write_manifest(out, "sweep", _args_config(args), {"seed": args.seed}, ["sweep.csv", "best.json"])
    scenes, images = _load_eval_data(args, detectors)
    result = hyperparameter_sweep(images, scenes, detectors, base, lows, highs, nmss, gammas)
    (out / "sweep.csv").write_text(result.to_csv())
    best = {
        "tau_low": result.best.tau_low,
        "tau_high": result.best.tau_high,
        "tau_nms": result.best.tau_nms,
        "gamma": result.best.gamma,
        "map50": result.best_map50,
        "rows": len(result.rows),
    }
    (out / "best.json").write_text(_dump(best))
    print(_dump(best), end="")
    return EXIT_OK


# -- budget -------------------------------------------------------------------


def cmd_budget(args) -> int:
    if args.res:
        res = check_resolutions(parse_int_list(args.res))
    else:
        res = check_resolutions([r for r in (args.res1, args.res2) if r is not None])
    t = TransitionConfig(0.0, 1.0, 1.0, args.gamma)
    stages = [StageConfig(r, t) for r in res[:-1]] + [StageConfig(res[-1])]
    cfg = PipelineConfig(tuple(stages))
    print(_dump({"resolutions": list(res), "gamma": args.gamma, "max_boxes": box_budget(cfg),
                 "pixels": pixel_budget(cfg)}), end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_pipeline_args(p):
    p.add_argument("--data", required=True, help="dataset directory (annotations.jsonl + images/)")
    p.add_argument("--res", default="512,256", help="stage resolutions, comma separated (default 512,256)")
    p.add_argument("--ckpt", help="trained checkpoint from `odgi train`")
    p.add_argument("--oracle", choices=("perfect", "noisy", "resolution_degraded"), help="use oracle stages")
    p.add_argument("--sigma", type=float, default=0.02, help="noisy oracle jitter (default 0.02)")
    p.add_argument("--p-drop", type=float, default=0.1, help="noisy oracle drop rate (default 0.1)")
    p.add_argument("--p-spurious", type=float, default=0.01, help="noisy oracle false-positive rate (default 0.01)")
    p.add_argument("--area-threshold", type=float, default=16.0,
                   help="smallest visible area in pixels for the degraded oracle (default 16)")
    p.add_argument("--tau-low", type=float, default=0.1, help="default 0.1")
    p.add_argument("--tau-high", type=float, default=0.9, help="default 0.9")
    p.add_argument("--tau-nms", type=float, default=0.25, help="default 0.25")
    p.add_argument("--gamma", type=int, default=3, help="crops per window (default 3)")
    p.add_argument("--ablation", default="full", help="full | no_groups | fixed_offsets[:o] | no_offsets")
    p.add_argument("--final-nms", type=float, default=0.5, help="IoU of the final NMS (default 0.5)")
    p.add_argument("--seed", type=int, default=0, help="oracle noise seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odgi", description="Grouped-instance detection cascade tools.")
    parser.add_argument("--version", action="version", version=f"odgi {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser(
        "generate",
        help="write synthetic scenes and annotations",
        description="Scene config keys (JSON) and defaults: seed=0, objects_per_image=3.0, "
        "object_size_fraction=0.00113, size_shape=8.0, aspect_spread=0.3, clustering=none, "
        "n_clusters=2, cluster_spread=0.03, allow_overlap=false, min_gap=0.0, image_size_px=1024.",
    )
    g.add_argument("--config", help="JSON file with scene generator settings (all optional)")
    g.add_argument("--count", type=int, default=100, help="number of scenes (default 100)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="overrides the config seed")
    g.add_argument("--no-images", action="store_true", help="write annotations only")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train toy stages with delayed two-stage training")
    t.add_argument("--stages", type=int, default=2, help="1 or 2 (default 2)")
    t.add_argument("--res", default="512,256", help="stage resolutions (default 512,256)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory for checkpoint, loss CSV and manifest")
    t.add_argument("--epochs", type=int, default=10, help="default 10")
    t.add_argument("--lr", type=float, default=1e-3, help="learning rate (default 1e-3)")
    t.add_argument("--lr-decay", type=float, default=0.0,
                   help="inverse-time decay, lr / (1 + decay * epoch) (default 0, constant)")
    t.add_argument("--batch-size", type=int, default=1, help="default 1")
    t.add_argument("--delay", type=int, default=3, help="epochs before stage 2 starts (default 3)")
    t.add_argument("--queue", type=int, default=64, help="crop queue capacity (default 64)")
    t.add_argument("--pool", type=int, default=4, help="pooled sub-blocks per cell side (default 4)")
    t.add_argument("--context", type=int, default=1, help="neighboring cells seen by each cell (default 1)")
    t.add_argument("--seed", type=int, default=0, help="default 0")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run the cascade and report mAP and cost")
    _add_pipeline_args(e)
    e.add_argument("--iou", default="0.5,0.75", help="IoU thresholds (default 0.5,0.75)")
    e.add_argument("--out", help="directory for metrics and detections")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid search over the first transition")
    _add_pipeline_args(s)
    s.add_argument("--grid-from-paper", action="store_true",
                   help="tau_low 0..0.4, tau_high 0.6..1.0 (step 0.1), tau_nms 0.25/0.5/0.75")
    s.add_argument("--tau-lows", default="0.1", help="comma separated (default 0.1)")
    s.add_argument("--tau-highs", default="0.9", help="comma separated (default 0.9)")
    s.add_argument("--tau-nmss", default="0.25", help="comma separated (default 0.25)")
    s.add_argument("--gammas", default="3", help="comma separated (default 3)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("budget", help="print the box and pixel budgets of a cascade")
    b.add_argument("--res1", type=int, default=512)
    b.add_argument("--res2", type=int)
    b.add_argument("--res", help="all stage resolutions, overrides --res1/--res2")
    b.add_argument("--gamma", type=int, default=3)
    b.set_defaults(func=cmd_budget)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"odgi: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"odgi: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"odgi: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
