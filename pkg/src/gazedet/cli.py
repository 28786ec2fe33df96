"""Command-line entry points: generate, train, eval, visualize, convert.

Exit codes: 0 success, 1 runtime failure, 2 usage error. All relative paths
resolve against ``--workdir`` (or the GAZEDET_WORKDIR environment variable).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import data as data_mod
from .gtgen import GroundTruthConfig
from .harness import (
    CheckpointError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    rescore_predictions,
    train,
)
from .losses import LossWeights
from .matching import MatchWeights
from .model import BACKBONE_PRESETS, ModelConfig, images_to_tensor
from .postprocess import extract_head_box

ENV_PREFIX = "GAZEDET_"

CONFIG_KEYS = (
    "max_lr",
    "epochs",
    "batch_size",
    "weight_decay",
    "seed",
    "deterministic",
    "max_steps",
    "lambda_h",
    "lambda_g",
    "lambda_c",
    "lambda_o",
    "lambda_det",
    "w_gaze",
    "w_head",
    "w_oof",
)


def parse_config_file(path: Path) -> dict:
    """Read ``key = value`` lines mirroring TrainConfig and weight fields."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}: line {lineno}: unknown key {key!r}")
        values[key] = val
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazedet",
        description="Multi-person gaze target detection: synthetic data, training, evaluation.",
        epilog=f"Environment: {ENV_PREFIX}WORKDIR overrides --workdir.",
    )
    parser.add_argument(
        "--workdir",
        default=os.environ.get(ENV_PREFIX + "WORKDIR", "."),
        help="base directory for relative paths (default: current directory)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="render a synthetic dataset to disk")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--scenes", type=int, required=True, help="number of scenes")
    gen.add_argument("--seed", type=int, default=0, help="generator seed")
    gen.add_argument("--image-size", type=int, default=128, help="rendered image size in pixels")
    gen.add_argument("--max-people", type=int, default=2, help="maximum persons per scene")
    gen.add_argument("--p-oof", type=float, default=0.15, help="per-person out-of-frame probability")
    gen.add_argument("--objects-min", type=int, default=1, help="minimum target squares per scene")
    gen.add_argument("--objects-max", type=int, default=3, help="maximum target squares per scene")

    tr = sub.add_parser("train", help="train a model on an annotation dataset")
    tr.add_argument("--data", required=True, help="annotations.jsonl file or directory containing it")
    tr.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    tr.add_argument("--config", default=None, help="key = value config file (CLI flags override)")
    tr.add_argument("--epochs", type=int, default=None, help="training epochs")
    tr.add_argument("--steps", type=int, default=None, help="cap on total optimizer steps")
    tr.add_argument("--batch-size", type=int, default=None, help="scenes per step")
    tr.add_argument("--max-lr", type=float, default=None, help="one-cycle peak learning rate")
    tr.add_argument("--weight-decay", type=float, default=None, help="decoupled weight decay")
    tr.add_argument("--seed", type=int, default=None, help="training seed")
    tr.add_argument("--no-deterministic", action="store_true", help="disable deterministic mode")
    tr.add_argument("--resume", default=None, help="checkpoint to resume from")
    tr.add_argument("--input-size", type=int, default=128, help="model input resolution")
    tr.add_argument("--heatmap-size", type=int, default=64, help="output heatmap resolution")
    tr.add_argument("--proposals", type=int, default=20, help="number of head-target proposals")
    tr.add_argument("--decoded-channels", type=int, default=64, help="decoder output channels")
    tr.add_argument("--backbone", default="compact", choices=sorted(BACKBONE_PRESETS), help="backbone preset")
    tr.add_argument("--head-hidden", type=int, default=32, help="hidden width of prediction heads")
    tr.add_argument("--no-head-reinjection", action="store_true", help="zero the re-injected head feature")
    tr.add_argument("--sigma", type=float, default=3.0, help="ground-truth Gaussian sigma in pixels")
    for name in ("lambda-h", "lambda-g", "lambda-c", "lambda-o", "lambda-det"):
        tr.add_argument(f"--{name}", type=float, default=None, help=f"loss weight {name.replace('-', '_')}")
    for name in ("w-gaze", "w-head", "w-oof"):
        tr.add_argument(f"--{name}", type=float, default=None, help=f"matching weight {name.replace('-', '_')}")

    ev = sub.add_parser("eval", help="evaluate a checkpoint (or the ground-truth oracle)")
    ev.add_argument("--data", required=True, help="annotations.jsonl file or directory containing it")
    ev.add_argument("--checkpoint", default=None, help="trained checkpoint")
    ev.add_argument("--oracle", action="store_true", help="score ground-truth-derived predictions")
    ev.add_argument("--out-json", default=None, help="write the metric report as JSON")
    ev.add_argument("--dump-predictions", default=None, help="write decoded instances as JSON-lines")
    ev.add_argument("--rescore-predictions", default=None, help="recompute mAP from a predictions dump")
    ev.add_argument("--auc-gt-radius", type=int, default=0, help="dilation radius for AUC ground truth")
    ev.add_argument("--batch-size", type=int, default=8, help="evaluation batch size")
    ev.add_argument("--sigma", type=float, default=3.0, help="ground-truth Gaussian sigma in pixels")

    vis = sub.add_parser("visualize", help="write per-instance heatmap overlay panels")
    vis.add_argument("--checkpoint", required=True, help="trained checkpoint")
    vis.add_argument("--data", required=True, help="annotations.jsonl file or directory containing it")
    vis.add_argument("--out", required=True, help="output directory for PNG panels")
    vis.add_argument("--scene-ids", default=None, help="comma-separated scene ids (default: first scene)")
    vis.add_argument("--max-instances", type=int, default=None, help="cap on instances per scene")

    co = sub.add_parser("convert", help="convert tabular annotations to the JSON-lines form")
    co.add_argument("--format", required=True, choices=["gazefollow-csv"], help="source format")
    co.add_argument("--src", required=True, help="source annotation file")
    co.add_argument("--dst", required=True, help="destination .jsonl file")
    co.add_argument("--stride", type=int, default=1, help="keep every stride-th distinct image")
    co.add_argument(
        "--image-size", type=float, nargs=2, default=None, metavar=("W", "H"),
        help="source image dimensions when coordinates are in pixels",
    )
    return parser


def _resolve(workdir: Path, p: str | None) -> Path | None:
    if p is None:
        return None
    path = Path(p)
    return path if path.is_absolute() else workdir / path


def _find_annotations(parser, path: Path) -> Path:
    if path.is_dir():
        candidate = path / "annotations.jsonl"
        if not candidate.exists():
            parser.error(f"no annotations.jsonl in {path}")
        return candidate
    if not path.exists():
        parser.error(f"dataset path {path} does not exist")
    return path


def _load_dataset(parser, path: Path, target_size: int | None):
    ann_path = _find_annotations(parser, path)
    records = data_mod.load_annotations(ann_path)
    samples = data_mod.materialize(records, image_root=ann_path.parent, target_size=target_size)
    if not samples:
        parser.error(f"dataset {ann_path} yielded no loadable scenes")
    return samples


def cmd_generate(parser, args) -> int:
    workdir = Path(args.workdir)
    out = _resolve(workdir, args.out)
    if args.scenes < 0:
        parser.error("--scenes must be >= 0")
    config = data_mod.SynthConfig(
        image_size=args.image_size,
        max_people=args.max_people,
        p_out_of_frame=args.p_oof,
        object_count_range=(args.objects_min, args.objects_max),
        rng_seed=args.seed,
    )
    n_scenes, n_instances = data_mod.write_synthetic_dataset(config, args.scenes, out)
    print(f"wrote {n_scenes} scenes with {n_instances} instances to {out}")
    return 0


def _train_value(args, file_values: dict, key: str, cast, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_values:
        raw = file_values[key]
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes")
        return cast(raw)
    return default


def cmd_train(parser, args) -> int:
    workdir = Path(args.workdir)
    data_path = _resolve(workdir, args.data)
    out = _resolve(workdir, args.out)
    resume = _resolve(workdir, args.resume)
    if resume is not None and not resume.exists():
        parser.error(f"resume checkpoint {resume} does not exist")

    file_values: dict = {}
    if args.config:
        cfg_path = _resolve(workdir, args.config)
        if not cfg_path.exists():
            parser.error(f"config file {cfg_path} does not exist")
        file_values = parse_config_file(cfg_path)

    def fv(key, cast, default):
        return _train_value(args, file_values, key, cast, default)

    loss_weights = LossWeights(
        lambda_h=fv("lambda_h", float, 1.0),
        lambda_g=fv("lambda_g", float, 2.5),
        lambda_c=fv("lambda_c", float, 1.0),
        lambda_o=fv("lambda_o", float, 1.0),
        lambda_det=fv("lambda_det", float, 1.0),
    )
    match_weights = MatchWeights(
        w_gaze=fv("w_gaze", float, 1.0),
        w_head=fv("w_head", float, 2.5),
        w_oof=fv("w_oof", float, 1.0),
    )
    deterministic = not args.no_deterministic
    if "deterministic" in file_values and not args.no_deterministic:
        deterministic = file_values["deterministic"].strip().lower() in ("1", "true", "yes")
    train_config = TrainConfig(
        max_lr=fv("max_lr", float, 1e-3),
        epochs=fv("epochs", int, 20),
        batch_size=fv("batch_size", int, 8),
        weight_decay=fv("weight_decay", float, 1e-4),
        seed=fv("seed", int, 0),
        loss_weights=loss_weights,
        match_weights=match_weights,
        deterministic=deterministic,
        max_steps=_train_value(args, file_values, "max_steps", int, None)
        if args.steps is None
        else args.steps,
    )
    model_config = ModelConfig(
        input_size=args.input_size,
        num_proposals=args.proposals,
        heatmap_size=(args.heatmap_size, args.heatmap_size),
        decoded_channels=args.decoded_channels,
        backbone_spec=args.backbone,
        head_hidden=args.head_hidden,
        use_head_reinjection=not args.no_head_reinjection,
    )
    gt_config = GroundTruthConfig(heatmap_size=model_config.heatmap_size, sigma=args.sigma)

    samples = _load_dataset(parser, data_path, model_config.input_size)
    ckpt = train(
        samples, train_config, model_config, out, gt_config=gt_config, resume=resume
    )
    print(f"trained {len(samples)} scenes; final checkpoint: {ckpt}")
    return 0


def _format_report(report) -> str:
    lines = [
        f"{'AUC':>12}: {report.auc:.4f}",
        f"{'Avg. Dist.':>12}: {report.avg_dist:.4f}",
        f"{'Min. Dist.':>12}: {report.min_dist:.4f}",
        f"{'mAP':>12}: {report.map_instance:.4f}",
    ]
    if report.oof_ap is not None:
        lines.append(f"{'AP':>12}: {report.oof_ap:.4f}")
    return "\n".join(lines)


def cmd_eval(parser, args) -> int:
    workdir = Path(args.workdir)
    data_path = _resolve(workdir, args.data)

    if args.rescore_predictions:
        dump_path = _resolve(workdir, args.rescore_predictions)
        if not dump_path.exists():
            parser.error(f"predictions dump {dump_path} does not exist")
        records = data_mod.load_annotations(_find_annotations(parser, data_path))
        rows = [json.loads(line) for line in dump_path.read_text().splitlines() if line.strip()]
        value = rescore_predictions(rows, records)
        print(f"{'mAP':>12}: {value:.4f} (rescored from {dump_path.name})")
        if args.out_json:
            out_json = _resolve(workdir, args.out_json)
            out_json.write_text(json.dumps({"map_instance": value}, indent=2) + "\n")
        return 0

    model = None
    gt_config = GroundTruthConfig(sigma=args.sigma)
    target_size = None
    if not args.oracle:
        if not args.checkpoint:
            parser.error("eval requires --checkpoint (or --oracle)")
        ckpt_path = _resolve(workdir, args.checkpoint)
        if not ckpt_path.exists():
            parser.error(f"checkpoint {ckpt_path} does not exist")
        payload = load_checkpoint(ckpt_path)
        model = model_from_checkpoint(payload)
        gt_config = GroundTruthConfig(heatmap_size=model.config.heatmap_size, sigma=args.sigma)
        target_size = model.config.input_size

    samples = _load_dataset(parser, data_path, target_size)
    report, dump_rows = evaluate(
        model,
        samples,
        gt_config=gt_config,
        batch_size=args.batch_size,
        oracle=args.oracle,
        auc_gt_radius=args.auc_gt_radius,
        collect_predictions=args.dump_predictions is not None,
    )
    print(_format_report(report))
    if args.out_json:
        out_json = _resolve(workdir, args.out_json)
        out_json.write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    if args.dump_predictions:
        dump_path = _resolve(workdir, args.dump_predictions)
        with open(dump_path, "w", encoding="utf-8") as fh:
            for row in dump_rows:
                fh.write(json.dumps(row) + "\n")
        print(f"wrote {len(dump_rows)} predictions to {dump_path}")
    return 0


def cmd_visualize(parser, args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import torch

    workdir = Path(args.workdir)
    ckpt_path = _resolve(workdir, args.checkpoint)
    if not ckpt_path.exists():
        parser.error(f"checkpoint {ckpt_path} does not exist")
    out = _resolve(workdir, args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = model_from_checkpoint(load_checkpoint(ckpt_path))
    samples = _load_dataset(parser, _resolve(workdir, args.data), model.config.input_size)

    if args.scene_ids:
        wanted = [s.strip() for s in args.scene_ids.split(",") if s.strip()]
        by_id = {s.scene_id: s for s in samples}
        missing = [w for w in wanted if w not in by_id]
        if missing:
            parser.error(f"unknown scene ids: {', '.join(missing)}")
        selected = [by_id[w] for w in wanted]
    else:
        selected = samples[:1]

    model.eval()
    written = 0
    with torch.no_grad():
        for sample in selected:
            _, proposals = model(images_to_tensor(sample.image))
            scene = proposals.scene(0).numpy()
            kept = [
                k
                for k in range(scene.head_maps.shape[0])
                if extract_head_box(scene.head_maps[k]) is not None
            ]
            kept.sort(key=lambda k: -float(scene.head_maps[k].max()))
            if args.max_instances is not None:
                kept = kept[: args.max_instances]
            for rank, k in enumerate(kept):
                fig, axes = plt.subplots(1, 4, figsize=(12, 3))
                panels = [
                    (sample.image, "scene"),
                    (scene.head_maps[k], "head heatmap"),
                    (scene.gaze_maps[k], "gaze heatmap"),
                    (scene.connection_maps[k], "connection map"),
                ]
                for ax, (img, title) in zip(axes, panels):
                    if img.ndim == 3:
                        ax.imshow(img)
                    else:
                        ax.imshow(img, cmap="inferno", vmin=0.0, vmax=1.0)
                    ax.set_title(title, fontsize=9)
                    ax.axis("off")
                fig.tight_layout()
                fname = out / f"{sample.scene_id.replace('/', '_')}_inst{rank:02d}.png"
                fig.savefig(fname, dpi=110)
                plt.close(fig)
                written += 1
    print(f"wrote {written} instance panels to {out}")
    return 0


def cmd_convert(parser, args) -> int:
    workdir = Path(args.workdir)
    src = _resolve(workdir, args.src)
    if not src.exists():
        parser.error(f"source file {src} does not exist")
    dst = _resolve(workdir, args.dst)
    image_size = tuple(args.image_size) if args.image_size else None
    n = data_mod.convert_gazefollow_csv(src, dst, stride=args.stride, image_size=image_size)
    print(f"wrote {n} annotation rows to {dst}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "generate": cmd_generate,
        "train": cmd_train,
        "eval": cmd_eval,
        "visualize": cmd_visualize,
        "convert": cmd_convert,
    }
    try:
        return handlers[args.command](parser, args)
    except (CheckpointError, data_mod.AnnotationFormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
