"""Command-line interface: generate, train, render, extract, eval.

Every command writes a run manifest (config snapshot, seed, timestamps,
artifact paths) next to its outputs, and is byte-deterministic given the same
inputs and seed. Exit codes: 0 success, 1 error, 2 usage,
3 failed reconstruction (empty mesh).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, default_run_config, load_run_config, write_run_config
from .data import (
    SCENES, DataError, generate_synthetic, get_scene, load_dataset, write_dataset,
)
from .field import SurfaceField
from .losses import AdaptiveConfig
from .mesh import (
    EmptyMeshError, chamfer, extract_mesh, field_sdf_fn, psnr, read_mesh, ssim,
    write_obj, write_ply,
)
from .optim import train as run_train
from .renderer import RenderConfig, render_image

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_FAILED_RECONSTRUCTION = 3


def _write_manifest(out_dir, command, args_ns, config_snapshot, artifacts, started):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "code_version": __version__,
        "seed": getattr(args_ns, "seed", None),
        "started_unix": started,
        "finished_unix": time.time(),
        "config": config_snapshot,
        "artifacts": [str(a) for a in artifacts],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    missing = [a for a in artifacts if not Path(a).exists()]
    if missing:
        raise RuntimeError(f"manifest artifacts missing on disk: {missing}")
    return path


def _load_config(args) -> "RunConfig":
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return default_run_config()


def _save_image(path, image):
    from PIL import Image

    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def cmd_generate(args) -> int:
    started = time.time()
    scene = get_scene(args.scene)
    dataset = generate_synthetic(
        scene, n_views=args.views, image_size=args.size, seed=args.seed,
        val_views=args.val_views,
    )
    out = Path(args.out)
    write_dataset(dataset, out)
    gt = extract_mesh(scene.sdf, resolution=args.gt_resolution)
    write_obj(gt, out / "ground_truth.obj")
    artifacts = sorted(str(p) for p in out.rglob("*.png"))
    artifacts += [
        str(out / "transforms_train.json"),
        str(out / "transforms_val.json"),
        str(out / "ground_truth.obj"),
    ]
    _write_manifest(
        out, "generate", args,
        {"scene": args.scene, "views": args.views, "size": args.size,
         "val_views": args.val_views, "gt_resolution": args.gt_resolution},
        artifacts, started,
    )
    print(f"wrote {len(dataset.images)} views + ground_truth.obj to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    adaptive = cfg.train.adaptive
    if args.no_lambda_r or args.constant_eikonal:
        adaptive = dataclasses.replace(adaptive, use_render_factor=False)
    if args.no_lambda_g or args.constant_eikonal:
        adaptive = dataclasses.replace(adaptive, use_bias_factor=False)
    cfg.train.adaptive = adaptive

    dataset = load_dataset(args.dataset, background=cfg.train.background)
    field = SurfaceField(
        cfg.grid, sdf_hidden=cfg.sdf_hidden, color_hidden=cfg.color_hidden,
        seed=cfg.train.seed,
    )
    field.init_sphere(seed=cfg.train.seed)
    out = Path(args.out)
    run_train(dataset, field, cfg.train, out_dir=out)
    write_run_config(cfg, out / "config.json")
    artifacts = [out / "ckpt_final.rsck", out / "train_log.jsonl", out / "config.json"]
    _write_manifest(out, "train", args, cfg.as_dict(), artifacts, started)
    print(f"training finished; checkpoint at {out / 'ckpt_final.rsck'}")
    return EXIT_OK


def cmd_render(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    field, step = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset, background=cfg.render.background)
    idxs = dataset.indices(args.split)
    if not idxs:
        raise DataError(f"dataset has no {args.split!r} split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rcfg = RenderConfig(
        n_samples=cfg.render.n_samples, background=cfg.render.background,
        seed=args.seed or 0,
    )
    per_image = []
    artifacts = []
    for k, i in enumerate(idxs):
        image, report = render_image(field, dataset.cameras[i], rcfg)
        path = out / f"render_{args.split}_{k}.png"
        _save_image(path, image)
        artifacts.append(path)
        per_image.append(
            {
                "index": k,
                "psnr": psnr(image, dataset.images[i]),
                "ssim": ssim(image, dataset.images[i]),
                "render_report": report,
            }
        )
    metrics = {
        "split": args.split,
        "checkpoint_step": step,
        "per_image": per_image,
        "mean_psnr": float(np.mean([m["psnr"] for m in per_image])),
        "mean_ssim": float(np.mean([m["ssim"] for m in per_image])),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    artifacts.append(out / "metrics.json")
    _write_manifest(out, "render", args, cfg.as_dict(), artifacts, started)
    print(
        f"rendered {len(idxs)} {args.split} views: "
        f"mean PSNR {metrics['mean_psnr']:.2f} dB, mean SSIM {metrics['mean_ssim']:.4f}"
    )
    return EXIT_OK


def cmd_extract(args) -> int:
    started = time.time()
    field, _ = load_checkpoint(args.checkpoint)
    mesh = extract_mesh(field_sdf_fn(field), resolution=args.resolution)
    out = Path(args.out)
    if out.suffix.lower() == ".ply":
        write_ply(mesh, out)
    else:
        write_obj(mesh, out)
    _write_manifest(
        out.parent, "extract", args,
        {"checkpoint": str(args.checkpoint), "resolution": args.resolution},
        [out], started,
    )
    print(f"extracted {len(mesh.triangles)} triangles to {out}")
    if mesh.is_empty:
        print("reconstruction failed: empty mesh", file=sys.stderr)
        return EXIT_FAILED_RECONSTRUCTION
    return EXIT_OK


def cmd_eval(args) -> int:
    mesh_a = read_mesh(args.mesh)
    mesh_b = read_mesh(args.truth)
    report = chamfer(mesh_a, mesh_b, samples_per_mesh=args.samples, seed=args.seed or 0)
    payload = {
        "chamfer": report.chamfer,
        "accuracy_mean": report.mean_ab,
        "completeness_mean": report.mean_ba,
        "samples_per_mesh": args.samples,
    }
    text = json.dumps(payload, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="raysurf",
        description="SDF surface reconstruction with ray-adaptive Eikonal regularization",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="torch thread count (default: env RAYSURF_THREADS or torch default)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset from an analytic scene")
    g.add_argument("--scene", required=True, help=f"one of: {', '.join(sorted(SCENES))}")
    g.add_argument("--views", type=int, default=20)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--val-views", type=int, default=4)
    g.add_argument("--gt-resolution", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="optimize a field on a dataset directory")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", default=None, help="JSON run config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--no-lambda-r", action="store_true",
                   help="ablation: disable the render-error Eikonal factor")
    t.add_argument("--no-lambda-g", action="store_true",
                   help="ablation: disable the geometric-bias Eikonal factor")
    t.add_argument("--constant-eikonal", action="store_true",
                   help="ablation: constant-weight Eikonal regularizer (both factors off)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a dataset split from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--split", default="val", choices=("train", "val"))
    r.add_argument("--config", default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("extract", help="marching-cubes mesh from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--resolution", type=int, default=256)
    e.add_argument("--out", required=True, help=".obj or .ply output path")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="Chamfer distance between two meshes")
    v.add_argument("--mesh", required=True)
    v.add_argument("--truth", required=True)
    v.add_argument("--samples", type=int, default=100_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads or os.environ.get("RAYSURF_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    try:
        return args.func(args)
    except EmptyMeshError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED_RECONSTRUCTION
    except (DataError, ConfigError, CheckpointError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
