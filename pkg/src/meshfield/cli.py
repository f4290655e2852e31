"""Command-line pipeline: train, bake, render, eval, bench, validate.

One JSON config drives a whole experiment; flags override file values.
Exit codes: 0 ok, 2 usage, 3 I/O or ingestion failure, 4 asset-invariant
violation, 5 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np
from PIL import Image

from . import baker, raster, toys, trainer
from .autodiff import TrainingError
from .config import ConfigError, RunConfig, load_config
from .dataset import IngestionError, load_transforms, orbit_cameras

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INVARIANT = 4
EXIT_DIVERGED = 5


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MESHFIELD_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _load_run_config(args) -> RunConfig:
    run = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run.seed = args.seed
    if args.supersample is not None:
        run.supersample = args.supersample
    if getattr(args, "out", None):
        run.out_dir = args.out
    if getattr(args, "scene", None):
        if args.scene.startswith("toy:"):
            pass  # dataset generated below; lattice stays as configured
        else:
            run.scene = {"synthetic": {"tag": "synthetic", "scale": run.scene.get("scale", 1.0)},
                         "forward_facing": {"tag": "forward_facing"},
                         "unbounded": {"tag": "unbounded"}}.get(args.scene, run.scene)
    return run


def _resolve_dataset(args, run: RunConfig, split: str = "train"):
    if getattr(args, "scene", None) and args.scene.startswith("toy:"):
        name = args.scene.split(":", 1)[1]
        if name not in toys.SCENES:
            raise IngestionError(f"unknown toy scene {name!r}; have {sorted(toys.SCENES)}")
        ddir = run.dataset_dir or os.path.join(run.out_dir or ".", "dataset")
        if not os.path.exists(os.path.join(ddir, "transforms_train.json")):
            toys.generate_toy_dataset(
                name,
                ddir,
                n_train=run.toy_train_views,
                n_test=run.toy_test_views,
                width=run.toy_image_size,
                height=run.toy_image_size,
                supersample=run.supersample,
            )
        run.dataset_dir = ddir
    if not run.dataset_dir:
        raise IngestionError("no dataset: provide --scene toy:<name> or dataset_dir in config")
    return load_transforms(run.dataset_dir, split)


def _save_image(path: str, img: np.ndarray):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def cmd_train(args) -> int:
    run = _load_run_config(args)
    if not run.out_dir:
        print("train: --out or config out_dir is required", file=sys.stderr)
        return EXIT_USAGE
    dataset = _resolve_dataset(args, run, "train")
    os.makedirs(run.out_dir, exist_ok=True)
    log = os.path.join(run.out_dir, "metrics.csv")

    stages = ["1", "2", "finetune"] if args.stage in (None, "all") else [args.stage]
    if stages[0] == "1":
        state = trainer.new_state(run)
    else:
        state = trainer.load_checkpoint(os.path.join(run.out_dir, "checkpoint.npz"))
        state.run = run
    for stage in stages:
        if stage == "1":
            trainer.train_stage1(state, dataset, log_path=log)
        elif stage == "2":
            trainer.train_stage2(state, dataset, log_path=log)
        elif stage == "finetune":
            trainer.finetune(state, dataset, log_path=log)
        else:
            print(f"train: unknown stage {stage!r}", file=sys.stderr)
            return EXIT_USAGE
        trainer.save_checkpoint(os.path.join(run.out_dir, "checkpoint.npz"), state)
    print(f"trained through {state.stage} ({state.step} steps total) -> {run.out_dir}")
    return EXIT_OK


def cmd_bake(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    dataset = load_transforms(state.run.dataset_dir, "train")
    asset = baker.bake(state, dataset.cameras, supersample=state.run.supersample)
    problems = baker.validate_asset(asset)
    if problems:
        for p in problems:
            print("invariant violation:", p, file=sys.stderr)
        return EXIT_INVARIANT
    baker.export_asset(asset, args.out)
    print(f"baked {asset.n_tris} triangles, {len(asset.pages)} pages -> {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    asset = baker.import_asset(args.asset)
    os.makedirs(args.out, exist_ok=True)
    if args.camera_json:
        with open(args.camera_json) as f:
            spec = json.load(f)
        from .dataset import Camera, focal_from_angle

        cams = [
            Camera(
                spec.get("width", 64),
                spec.get("height", 64),
                focal_from_angle(spec.get("width", 64), spec["camera_angle_x"]),
                np.array(fr["transform_matrix"]),
            )
            for fr in spec["frames"]
        ]
    else:
        cams = orbit_cameras(args.frames, args.orbit_radius, args.size, args.size, 0.6)
    for i, cam in enumerate(cams):
        img = raster.render(asset, cam, supersample=args.supersample or 2, threads=_threads(args))
        _save_image(os.path.join(args.out, f"frame_{i:04d}.png"), img)
    print(f"rendered {len(cams)} frames -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = []
    if args.checkpoint:
        state = trainer.load_checkpoint(args.checkpoint)
        dataset = load_transforms(state.run.dataset_dir, args.split)
        for i, cam in enumerate(dataset.cameras):
            if state.stage == trainer.STAGE1:
                img = trainer.render_stage1(state, cam, supersample=state.run.supersample)
            else:
                img = trainer.render_binary(
                    state, cam, supersample=state.run.supersample, background=state.run.background
                )
            rows.append({"image": i, "psnr": raster.psnr(img, dataset.images[i])})
    else:
        asset = baker.import_asset(args.asset)
        state = trainer.load_checkpoint(args.with_dataset_from) if args.with_dataset_from else None
        ddir = state.run.dataset_dir if state else args.dataset
        dataset = load_transforms(ddir, args.split)
        for i, cam in enumerate(dataset.cameras):
            img = raster.render(asset, cam, supersample=args.supersample or 2, threads=_threads(args))
            rows.append({"image": i, "psnr": raster.psnr(img, dataset.images[i])})

    mean = float(np.mean([r["psnr"] for r in rows]))
    out = args.out or "eval.csv"
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["image", "psnr"])
        w.writeheader()
        w.writerows(rows)
        w.writerow({"image": "mean", "psnr": mean})
    for r in rows:
        print(f"image {r['image']}: psnr {r['psnr']:.2f} dB")
    print(f"mean psnr {mean:.2f} dB -> {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    asset = baker.import_asset(args.asset)
    cams = orbit_cameras(args.frames, args.orbit_radius, args.size, args.size, 0.6)
    rows, summary = raster.bench(asset, cams, supersample=args.supersample or 2, threads=_threads(args))
    out = args.out or "bench.csv"
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["frame", "raster_ms", "shade_ms", "total_ms"])
        w.writeheader()
        w.writerows(rows)
    print(
        f"{summary['frames']} frames: mean {summary['mean_ms']:.2f} ms, "
        f"median {summary['median_ms']:.2f} ms -> {out}"
    )
    return EXIT_OK


def cmd_validate(args) -> int:
    asset = baker.import_asset(args.asset)
    problems = baker.validate_asset(asset)
    if problems:
        for p in problems:
            print("invariant violation:", p)
        return EXIT_INVARIANT
    print(
        f"asset ok: {asset.n_tris} triangles, {len(asset.pages)} pages, "
        f"{asset.manifest.get('opaque_texels', '?')} opaque texels"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshfield", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--supersample", type=int, choices=(1, 2), default=None)

    sp = sub.add_parser("train", help="run the optimization stages")
    common(sp)
    sp.add_argument("--stage", choices=("1", "2", "finetune", "all"), default="all")
    sp.add_argument("--scene", help="synthetic|forward_facing|unbounded|toy:<name>")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("bake", help="convert a checkpoint into a textured asset")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_bake)

    sp = sub.add_parser("render", help="rasterize a baked asset")
    common(sp)
    sp.add_argument("asset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int, default=8)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--orbit-radius", type=float, default=2.2)
    sp.add_argument("--camera-json", help="transforms-style camera list")
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("eval", help="PSNR against a dataset split")
    common(sp)
    sp.add_argument("--checkpoint", help="evaluate the live model")
    sp.add_argument("--asset", help="evaluate a baked asset directory")
    sp.add_argument("--dataset", help="dataset dir (for --asset)")
    sp.add_argument("--with-dataset-from", help="checkpoint whose dataset_dir to reuse")
    sp.add_argument("--split", default="test")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("bench", help="frame-time statistics")
    common(sp)
    sp.add_argument("asset")
    sp.add_argument("--frames", type=int, default=360)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--orbit-radius", type=float, default=2.2)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("validate", help="check every asset invariant")
    common(sp)
    sp.add_argument("asset")
    sp.set_defaults(fn=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (IngestionError, baker.AssetError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
