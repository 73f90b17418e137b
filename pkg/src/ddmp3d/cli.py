"""Command-line surface: gradcheck, toytrain, infer, evaluate, ablate.

Exit codes: 0 success, 1 verification failure (failed gradient check,
training divergence, evaluation frame errors), 2 usage or IO error.
Every run with a fixed seed and fixed inputs is bitwise reproducible.
"""

import argparse
import hashlib
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import verify
from .autograd.tensorio import load_tensor
from .evaluation import EvalConfig, evaluate
from .head import AnchorConfig
from .kitti import parse_calib_file, write_predictions
from .losses import LossConfig
from .pipeline import (ModelConfig, init_model_params, load_checkpoint,
                       make_anchors, save_checkpoint)
from .synth import SynthConfig, generate_dataset, write_scene_files
from .training import (TrainingDiverged, anchor_stats_from_scenes,
                       build_targets, history_csv, run_inference, train)


@dataclass
class TrainSettings:
    iters: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    train_scenes: int = 16
    val_scenes: int = 8
    seed: int = 0


def parse_config_file(path):
    items = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            items[key.strip()] = value.strip()
    return items


def _apply_items(obj, items, used):
    for f in fields(obj):
        if f.name not in items:
            continue
        raw = items[f.name]
        used.add(f.name)
        cur = getattr(obj, f.name)
        if isinstance(cur, bool):
            setattr(obj, f.name, raw.lower() in ("1", "true", "yes"))
        elif isinstance(cur, int):
            setattr(obj, f.name, int(raw))
        elif isinstance(cur, float):
            setattr(obj, f.name, float(raw))
        elif isinstance(cur, tuple):
            parts = [p for p in raw.split(",") if p]
            conv = (str if f.name == "class_names" else
                    (float if isinstance(cur[0], float) else int))
            setattr(obj, f.name, tuple(conv(p) for p in parts))
        else:
            setattr(obj, f.name, raw)
    post = getattr(obj, "__post_init__", None)
    if post is not None:
        post()


def build_configs(config_path=None, overrides=None):
    """Assemble (model, synth, loss, train) configs from a flat key=value
    file plus CLI overrides; unknown keys are usage errors."""
    items = dict(parse_config_file(config_path)) if config_path else {}
    items.update(overrides or {})
    model, synth = ModelConfig(), SynthConfig()
    loss, settings = LossConfig(), TrainSettings()
    used = set()
    for obj in (model, synth, loss, settings):
        _apply_items(obj, items, used)
    unknown = set(items) - used
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    model.image_hw = synth.image_hw
    model.class_names = synth.class_names
    model.num_classes = len(synth.class_names)
    return model, synth, loss, settings


def _config_hash(model, synth, loss, settings):
    text = repr((model, synth, loss, settings)).encode()
    return hashlib.sha256(text).hexdigest()[:16]


def _write_run_manifest(out_dir, command, seed, chash):
    with open(os.path.join(out_dir, "run_manifest.txt"), "w") as f:
        f.write(f"command {command}\nseed {seed}\nconfig_hash {chash}\n")


def cmd_gradcheck(args):
    results = verify.run_scope(args.scope, seed=args.seed, eps=args.eps)
    failed = []
    print(f"{'check':<32} {'max rel err':>14}  status")
    for name, report in results:
        status = "pass" if report.passed else "FAIL"
        print(f"{name:<32} {report.max_rel_err:>14.3e}  {status}")
        if not report.passed:
            failed.append(name)
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed (eps={args.eps:g})")
    return 0


def _prepare_run(args, overrides):
    model, synth, loss, settings = build_configs(args.config, overrides)
    if args.iters is not None:
        settings.iters = args.iters
    if args.seed is not None:
        settings.seed = args.seed
    return model, synth, loss, settings


def _train_run(model, synth, loss, settings, out_dir, log=print):
    train_scenes = generate_dataset(synth, settings.train_scenes,
                                    settings.seed)
    val_scenes = generate_dataset(synth, settings.val_scenes,
                                  settings.seed, salt=1)
    stats, z_mean = anchor_stats_from_scenes(train_scenes, AnchorConfig())
    model.cde_depth_prior = z_mean
    anchor_config = AnchorConfig(stats=stats)
    anchors = make_anchors(model, anchor_config)
    targets = [build_targets(s, anchors, model, loss.positive_iou)
               for s in train_scenes]
    params = init_model_params(model, settings.seed)
    history = train(params, model, loss, train_scenes, targets,
                    iters=settings.iters, lr=settings.lr,
                    momentum=settings.momentum,
                    batch_size=settings.batch_size, log=log)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "loss.csv"), "w") as f:
        f.write(history_csv(history))
    save_checkpoint(os.path.join(out_dir, "checkpoint"), params, model,
                    anchor_stats=stats)
    for split, scenes in (("train", train_scenes), ("val", val_scenes)):
        split_dir = os.path.join(out_dir, "data", split)
        for i, scene in enumerate(scenes):
            write_scene_files(scene, i, split_dir)
    return params, anchors, history, val_scenes


def cmd_toytrain(args):
    overrides = {}
    if args.det_weight is not None:
        overrides["det_weight"] = str(args.det_weight)
    if args.aux_weight is not None:
        overrides["aux_weight"] = str(args.aux_weight)
    if args.cde_mode is not None:
        overrides["cde_mode"] = args.cde_mode
    model, synth, loss, settings = _prepare_run(args, overrides)
    os.makedirs(args.out, exist_ok=True)
    _write_run_manifest(args.out, "toytrain", settings.seed,
                        _config_hash(model, synth, loss, settings))
    try:
        _, _, history, _ = _train_run(model, synth, loss, settings, args.out)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    first, last = history[0][-1], history[-1][-1]
    print(f"trained {settings.iters} iterations: total loss "
          f"{first:.4f} -> {last:.4f}")
    print(f"artifacts under {args.out}")
    return 0


def _frames_in(directory):
    image_dir = os.path.join(directory, "image")
    return sorted(os.path.splitext(f)[0] for f in os.listdir(image_dir)
                  if f.endswith(".ddt"))


def cmd_infer(args):
    config, params, anchor_config = load_checkpoint(args.checkpoint)
    if args.score_threshold is not None:
        config.score_threshold = args.score_threshold
    anchors = make_anchors(config, anchor_config)
    os.makedirs(args.out, exist_ok=True)
    for frame in _frames_in(args.frames):
        image = load_tensor(os.path.join(args.frames, "image", frame + ".ddt"))[0]
        depth = load_tensor(os.path.join(args.frames, "depth", frame + ".ddt"))[0]
        calib = parse_calib_file(os.path.join(args.frames, "calib",
                                              frame + ".txt"))
        dets = run_inference(params, config, anchors, image, depth, calib)
        write_predictions(dets, calib, os.path.join(args.out, frame + ".txt"),
                          class_names=config.class_names)
    print(f"wrote predictions for {len(_frames_in(args.frames))} frames "
          f"to {args.out}")
    return 0


def cmd_evaluate(args):
    config = EvalConfig(recall_mode=args.mode)
    if args.iou_threshold is not None:
        config.iou_thresholds = {cls: args.iou_threshold
                                 for cls in config.iou_thresholds}
    report = evaluate(args.preds, args.gts, args.calib, config)
    print(report.table())
    for row in report.machine_rows():
        print(row)
    return 1 if report.warnings else 0


ARM_CONFIGS = {
    "baseline": dict(fusion="baseline", use_cde="false"),
    "ddmp-single": dict(fusion="ddmp", ddmp_single_scale="true",
                        use_cde="false"),
    "ddmp-multi": dict(fusion="ddmp", ddmp_single_scale="false",
                       use_cde="false"),
    "ddmp-cde": dict(fusion="ddmp", ddmp_single_scale="false",
                     use_cde="true"),
}


def cmd_ablate(args):
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    unknown = [a for a in arms if a not in ARM_CONFIGS]
    if unknown:
        print(f"error: unknown arm(s) {unknown}; choices: "
              f"{sorted(ARM_CONFIGS)}", file=sys.stderr)
        return 2
    print(f"ablation arms: {', '.join(arms)}")
    rows = []
    for arm in arms:
        overrides = {k: v for k, v in ARM_CONFIGS[arm].items()}
        model, synth, loss, settings = _prepare_run(args, overrides)
        out_dir = os.path.join(args.out, arm)
        os.makedirs(out_dir, exist_ok=True)
        params, anchors, history, val_scenes = _train_run(
            model, synth, loss, settings, out_dir, log=None)
        pred_dir = os.path.join(out_dir, "preds")
        os.makedirs(pred_dir, exist_ok=True)
        val_dir = os.path.join(out_dir, "data", "val")
        for frame in _frames_in(val_dir):
            image = load_tensor(os.path.join(val_dir, "image", frame + ".ddt"))[0]
            depth = load_tensor(os.path.join(val_dir, "depth", frame + ".ddt"))[0]
            calib = parse_calib_file(os.path.join(val_dir, "calib",
                                                  frame + ".txt"))
            dets = run_inference(params, model, anchors, image, depth, calib)
            write_predictions(dets, calib,
                              os.path.join(pred_dir, frame + ".txt"),
                              class_names=model.class_names)
        cfg = EvalConfig(recall_mode=args.mode)
        cfg.iou_thresholds = {cls: args.iou_threshold
                              for cls in model.class_names}
        report = evaluate(pred_dir, os.path.join(val_dir, "label"),
                          os.path.join(val_dir, "calib"), cfg)
        aps = {(t, m): r.ap for _, t, m, _, r in report.rows}
        rows.append((arm, history[-1][-1], aps))
    print(f"{'arm':<14} {'final loss':>11} {'AP3D mod':>9} {'AP3D easy':>10} "
          f"{'AP3D hard':>10} {'APBEV mod':>10}")
    for arm, final_loss, aps in rows:
        print(f"{arm:<14} {final_loss:>11.4f} "
              f"{aps.get(('moderate', '3d'), 0.0):>9.4f} "
              f"{aps.get(('easy', '3d'), 0.0):>10.4f} "
              f"{aps.get(('hard', '3d'), 0.0):>10.4f} "
              f"{aps.get(('moderate', 'bev'), 0.0):>10.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ddmp3d",
        description="Depth-conditioned dynamic message propagation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--scope", default="all",
                   choices=["primitives", "ddmp", "head", "losses", "all"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-5)
    g.set_defaults(fn=cmd_gradcheck)

    t = sub.add_parser("toytrain", help="train on synthetic scenes")
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--det-weight", type=float, default=None)
    t.add_argument("--aux-weight", type=float, default=None)
    t.add_argument("--cde-mode", choices=["z", "xy", "xyz"], default=None)
    t.set_defaults(fn=cmd_toytrain)

    i = sub.add_parser("infer", help="run inference over a frame directory")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--frames", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--score-threshold", type=float, default=None)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("evaluate", help="KITTI-protocol AP evaluation")
    e.add_argument("--preds", required=True)
    e.add_argument("--gts", required=True)
    e.add_argument("--calib", default=None)
    e.add_argument("--mode", choices=["R11", "R40"], default="R40")
    e.add_argument("--iou-threshold", type=float, default=None)
    e.set_defaults(fn=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and compare fusion arms")
    a.add_argument("--arms", default="baseline,ddmp-single,ddmp-multi,ddmp-cde")
    a.add_argument("--config", default=None)
    a.add_argument("--iters", type=int, default=None)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--out", required=True)
    a.add_argument("--mode", choices=["R11", "R40"], default="R40")
    a.add_argument("--iou-threshold", type=float, default=0.5)
    a.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
