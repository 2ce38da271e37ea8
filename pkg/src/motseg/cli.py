"""Command-line entry points: synth, annotate, train, eval, bench, viz.

Settings resolve as flags > config file > defaults. Outputs go to ``--out``,
or to ``$MOTSEG_OUT/<command>`` (default ``./runs/<command>``) when it is
omitted. Every command writes its resolved settings next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .annotation import AnnotationError, label_motion, read_poses, read_tracklets, write_labels
from .config import RunConfig, RunConfigError, load_run_config, parse_override
from .datasets import DatasetError, FrameSample, load_class_agnostic, load_instancemotseg, read_flow, read_rgb, split_sequence
from .evaluation import benchmark, config_fingerprint, count_params, evaluate
from .synthetic import GenerationError, generate_synthetic, render_synthetic
from .training import TrainingDiverged, alternate_train, build_model, load_checkpoint, resize_sample, save_checkpoint, set_deterministic

log = logging.getLogger("motseg")

OUT_ENV = "MOTSEG_OUT"
EXIT_ERROR = 2
EXIT_NAN = 3


class CommandError(RuntimeError):
    pass


def output_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_config(args) -> RunConfig:
    overrides = [parse_override(s) for s in getattr(args, "set", None) or []]
    flags = {}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    for flag, section, key in (
        ("iterations", "train", "iterations"),
        ("lr", "train", "lr"),
        ("input_mode", "model", "input_mode"),
        ("backbone", "model", "backbone"),
        ("data", "dataset", "root"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            flags.setdefault(section, {})[key] = value
    return load_run_config(getattr(args, "config", None), overrides + ([flags] if flags else []))


# --------------------------------------------------------------------------
# data


def load_samples(cfg: RunConfig, split: str, root: Optional[str] = None) -> List[FrameSample]:
    root = root or cfg.dataset.root
    if root is None:
        if cfg.dataset.kind != "synthetic":
            raise CommandError(f"dataset.kind={cfg.dataset.kind!r} needs dataset.root")
        return _synthetic_split(cfg, split)
    return load_instancemotseg(root, None if split == "all" else split)


def _synthetic_split(cfg: RunConfig, split: str) -> List[FrameSample]:
    out = []
    for seq in render_synthetic(cfg.synthetic_config()):
        keep = set(split_sequence([s.frame_id for s in seq.samples], None if split == "all" else split))
        out.extend(s for s in seq.samples if s.frame_id in keep)
    return out


def _resized(samples, meta):
    size = tuple(meta.get("run", {}).get("train", {}).get("input_size") or ())
    return [resize_sample(s, size) for s in samples] if size else list(samples)


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from exc


def _meta_config(meta) -> RunConfig:
    doc = meta.get("run")
    return load_run_config(None, [doc]) if doc else RunConfig()


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = run_config(args)
    out = output_dir(args, "synth")
    seqs = generate_synthetic(cfg.synthetic_config(), out / "data")
    cfg.dump(out / "config.yaml")
    n = sum(len(s.samples) for s in seqs)
    print(f"wrote {n} frames in {len(seqs)} sequences to {out / 'data'}")
    return 0


def cmd_annotate(args) -> int:
    out = output_dir(args, "annotate")
    poses = read_poses(args.poses)
    tracklets = read_tracklets(args.tracklets)
    labels = label_motion(tracklets, poses, threshold=args.threshold, window=args.window)
    write_labels(labels, out / "labels.txt", args.threshold, args.window)
    resolved = {"poses": str(args.poses), "tracklets": str(args.tracklets), "threshold": args.threshold, "window": args.window}
    resolved["fingerprint"] = config_fingerprint(resolved)
    (out / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    moving = sum(lb.moving for lb in labels)
    print(f"labelled {len(labels)} observations ({moving} moving) -> {out / 'labels.txt'}")
    return 0


def cmd_train(args) -> int:
    cfg = run_config(args)
    out = output_dir(args, "train")
    set_deterministic()
    sem = load_samples(cfg, cfg.dataset.train_split)
    mot = load_class_agnostic(cfg.dataset.motion_root) if cfg.dataset.motion_root else sem
    tc = cfg.train_config()
    model = build_model(cfg.model_config(), cfg.seed)
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    cfg.dump(out / "config.yaml")
    alternate_train(model, sem, mot, tc, log_path=log_path)
    save_checkpoint(model, out / "model.ckpt", {"run": cfg.to_dict()})
    print(f"trained {tc.iterations} iterations on {len(sem)} frames -> {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    cfg = _meta_config(meta)
    out = output_dir(args, "eval")
    split = args.split or cfg.dataset.eval_split
    samples = _resized(load_samples(cfg, split, args.dataset), meta)
    if not samples:
        raise CommandError(f"no frames in split {split!r}")
    report = evaluate(model, samples, cfg.eval.conf_thresh, config=meta)
    (out / "report.txt").write_text("\n".join(report.records()) + "\n")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    resolved = {"checkpoint": str(args.checkpoint), "dataset": args.dataset, "split": split, "fingerprint": report.fingerprint}
    (out / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    print(report.table())
    if report.has_nan():
        log.error("report contains NaN metrics")
        return EXIT_NAN
    return 0


def cmd_bench(args) -> int:
    model, meta = _load_model(args.checkpoint)
    cfg = _meta_config(meta)
    set_deterministic()
    samples = _resized(load_samples(cfg, args.split or cfg.dataset.eval_split, args.dataset), meta)
    if not samples:
        raise CommandError("no frames to benchmark")
    warmup = cfg.eval.warmup if args.warmup is None else args.warmup
    runs = cfg.eval.runs if args.runs is None else args.runs
    fps, ms = benchmark(model, samples, warmup, runs)
    params = count_params(model)
    lines = [f"fps={fps:.3f}", f"time_ms={ms:.3f}", f"params_m={params:.6f}"]
    print("\n".join(lines))
    if args.out or os.environ.get(OUT_ENV):
        out = output_dir(args, "bench")
        (out / "bench.txt").write_text("\n".join(lines) + "\n")
    if not all(np.isfinite([fps, ms, params])):
        return EXIT_NAN
    return 0


def cmd_viz(args) -> int:
    from .viz import render_visualization

    model, meta = _load_model(args.checkpoint)
    out = output_dir(args, "viz")
    image = read_rgb(args.image)
    image_t1 = read_rgb(args.image_t1) if args.image_t1 else None
    flow = read_flow(args.flow) if args.flow else None
    if model.input_mode == "rgb_flow" and flow is None:
        raise CommandError("this model takes optical flow; pass --flow")
    if model.input_mode == "rgb_rgb" and image_t1 is None:
        raise CommandError("this model takes a second frame; pass --image-t1")
    sample = FrameSample(Path(args.image).stem, "viz", image, image_t1, flow, [])
    written = render_visualization(model, sample, out)
    for path in written.values():
        print(path)
    return 0


# --------------------------------------------------------------------------
# parser


def _config_flags(p):
    p.add_argument("--config", help="YAML run config (sections: dataset, model, train, eval, seed)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value; repeatable")
    p.add_argument("--seed", type=int, help="root seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motseg",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Precedence: flags > --config file > defaults.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the synthetic moving-shapes dataset")
    _config_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("annotate", help="label tracked objects as moving or static from ego poses")
    p.add_argument("--poses", required=True)
    p.add_argument("--tracklets", required=True)
    p.add_argument("--threshold", type=float, default=1.0, help="speed threshold in m/s (default 1.0)")
    p.add_argument("--window", type=int, default=5, help="regression window in records (default 5)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", help="alternate semantic and motion training")
    _config_flags(p)
    p.add_argument("--data", help="dataset root (overrides dataset.root)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--input-mode", dest="input_mode")
    p.add_argument("--backbone")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AP per head and pixel motion IoU")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset root; defaults to the training run's dataset")
    p.add_argument("--split", choices=("train", "test", "all"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="median latency, fps and parameter count")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--split", choices=("train", "test", "all"))
    p.add_argument("--warmup", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("viz", help="prototype / coefficient grids and overlays for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--flow", help=".flo file for rgb_flow models")
    p.add_argument("--image-t1", dest="image_t1", help="next frame for rgb_rgb models")
    p.add_argument("--out")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, RunConfigError, DatasetError, AnnotationError, GenerationError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"motseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
