"""Command-line entry points: data synthesis, training, inpainting,
evaluation, ablation, and serving.

A config file is a flat key=value document (one pair per line, '#' comments)
whose keys mirror the training and sampler config fields; command-line flags
override file values.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .branch import AblationAxes, InpaintOptions, bld_inpaint, inpaint
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import CodecTrainConfig
from .diffusion import SamplerConfig
from .masks import load_mask_png, save_mask_png
from .scenes import load_image_png, load_manifest, save_image_png, synth_dataset
from .training import (
    TrainConfig,
    build_base,
    build_branch,
    build_codec,
    codec_checkpoint,
    train_base,
    train_codec_from_records,
    train_inpainting,
)


def read_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"config line is not key=value: {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _cfg_get(cfg: dict[str, str], key: str, cast, default):
    if key not in cfg:
        return default
    raw = cfg[key]
    if cast is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    return cast(raw)


def _resolve(path: str, checkpoint_dir: str | None) -> Path:
    p = Path(path)
    if not p.is_absolute() and checkpoint_dir and not p.exists():
        return Path(checkpoint_dir) / p
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inpainter")
    parser.add_argument("--seed", type=int, default=None, help="global RNG seed")
    parser.add_argument("--config", type=str, default=None, help="flat key=value config file")
    parser.add_argument("--checkpoint-dir", type=str, default=None,
                        help="directory for resolving relative checkpoint paths")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a procedural scene dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--kind", choices=("seg", "brush"), default="seg")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-codec", help="train the image codec")
    p.add_argument("--data", required=True, help="dataset directory (with manifest.jsonl)")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("train-base", help="train the text-to-image denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("train-branch", help="train the inpainting branch")
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--no-freeze-base", action="store_true")
    p.add_argument("--single-branch", action="store_true")
    p.add_argument("--encoder", choices=("codec", "conv"), default="codec")
    p.add_argument("--mask-in", choices=("with", "without"), default="with")
    p.add_argument("--cross-attn", choices=("with", "without"), default="without")
    p.add_argument("--injection", choices=("full", "half", "cn"), default="full")

    p = sub.add_parser("inpaint", help="inpaint one image file")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--branch", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--blend", choices=("none", "paste", "blur"), default="blur")
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--guidance", type=float, default=None)

    p = sub.add_parser("eval", help="run the benchmark over a record set")
    p.add_argument("--bench", required=True, help="benchmark dataset directory")
    p.add_argument("--codec", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--branch", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--blend", choices=("none", "paste", "blur"), default="none")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--budget", type=int, default=2000)
    p.add_argument("--steps", type=int, default=20, help="sampler steps per evaluation")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--codec", required=True)
    p.add_argument("--base", action="append", required=True,
                   help="base checkpoint, repeatable; NAME=PATH or PATH")
    p.add_argument("--branch", action="append", required=True,
                   help="branch checkpoint, repeatable; NAME=PATH or PATH")
    return parser


def _named_paths(entries: list[str], checkpoint_dir: str | None) -> dict[str, Path]:
    out = {}
    for i, entry in enumerate(entries):
        if "=" in entry:
            name, path = entry.split("=", 1)
        else:
            name, path = Path(entry).stem, entry
        out[name or f"model{i}"] = _resolve(path, checkpoint_dir)
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = read_config_file(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else _cfg_get(cfg, "seed", int, 0)
    ckdir = args.checkpoint_dir

    if args.command == "synth-data":
        records = synth_dataset(args.count, seed, args.kind, args.out)
        print(f"wrote {len(records)} records to {args.out}/manifest.jsonl")
        return 0

    if args.command == "train-codec":
        records = load_manifest(Path(args.data) / "manifest.jsonl")
        config = CodecTrainConfig(
            learning_rate=_cfg_get(cfg, "learning_rate", float, 3e-3),
            steps=args.steps or _cfg_get(cfg, "steps", int, 5000),
            batch_size=_cfg_get(cfg, "batch_size", int, 16),
            seed=seed,
        )
        codec, history = train_codec_from_records(records, args.data, config)
        save_checkpoint(
            codec_checkpoint(codec, {"holdout_mse": history["holdout_mse"]}).tensors,
            codec_checkpoint(codec).config,
            _resolve(args.out, ckdir),
        )
        print(f"codec holdout MSE {history['holdout_mse']:.2e} -> {args.out}")
        return 0

    if args.command == "train-base":
        records = load_manifest(Path(args.data) / "manifest.jsonl")
        codec = build_codec(load_checkpoint(_resolve(args.codec, ckdir)))
        config = TrainConfig(
            learning_rate=_cfg_get(cfg, "learning_rate", float, 0.02),
            steps=args.steps or _cfg_get(cfg, "steps", int, 20000),
            batch_size=_cfg_get(cfg, "batch_size", int, 8),
            seed=seed,
            momentum=_cfg_get(cfg, "momentum", float, 0.9),
            cond_dropout=_cfg_get(cfg, "cond_dropout", float, 0.1),
        )
        ckpt, history = train_base(records, config, codec, args.data)
        save_checkpoint(ckpt.tensors, ckpt.config, _resolve(args.out, ckdir))
        ema = history["ema"]
        print(
            f"base EMA loss {ema['head']:.4f} -> {ema['tail']:.4f} "
            f"(ok={ema['ok']}) -> {args.out}"
        )
        return 0

    if args.command == "train-branch":
        records = load_manifest(Path(args.data) / "manifest.jsonl")
        codec = build_codec(load_checkpoint(_resolve(args.codec, ckdir)))
        base_ckpt = load_checkpoint(_resolve(args.base, ckdir))
        config = TrainConfig(
            learning_rate=_cfg_get(cfg, "learning_rate", float, 0.02),
            steps=args.steps or _cfg_get(cfg, "steps", int, 10000),
            batch_size=_cfg_get(cfg, "batch_size", int, 8),
            seed=seed,
            freeze_base=not args.no_freeze_base,
            single_branch=args.single_branch,
            axes=AblationAxes(
                encoder=args.encoder,
                mask_in_input=args.mask_in,
                cross_attn=args.cross_attn,
                injection=args.injection,
            ),
            momentum=_cfg_get(cfg, "momentum", float, 0.9),
            cond_dropout=_cfg_get(cfg, "cond_dropout", float, 0.1),
        )
        ckpt, history = train_inpainting(records, base_ckpt, config, codec, args.data)
        save_checkpoint(ckpt.tensors, ckpt.config, _resolve(args.out, ckdir))
        ema = history["ema"]
        print(
            f"branch EMA loss {ema['head']:.4f} -> {ema['tail']:.4f} "
            f"(ok={ema['ok']}) -> {args.out}"
        )
        return 0

    if args.command == "inpaint":
        torch.set_num_threads(1)
        codec = build_codec(load_checkpoint(_resolve(args.codec, ckdir)))
        base, text_encoder, schedule = build_base(load_checkpoint(_resolve(args.base, ckdir)))
        branch = build_branch(load_checkpoint(_resolve(args.branch, ckdir)))
        image = load_image_png(args.image)
        mask = load_mask_png(args.mask)
        options = InpaintOptions(
            w=args.w,
            blend_mode=args.blend,
            blur_sigma=args.sigma,
            prompt=args.prompt,
            sampler=SamplerConfig(
                steps=args.steps or _cfg_get(cfg, "steps", int, 50),
                guidance_scale=args.guidance
                if args.guidance is not None
                else _cfg_get(cfg, "guidance_scale", float, 7.5),
                seed=seed,
            ),
        )
        out = inpaint(image, mask, options, base, branch, codec, schedule, text_encoder)
        save_image_png(out, args.out)
        print(f"wrote {args.out}")
        return 0

    if args.command == "eval":
        from .benchmark import run_benchmark, standard_pipelines

        torch.set_num_threads(1)
        codec = build_codec(load_checkpoint(_resolve(args.codec, ckdir)))
        base_ckpt = load_checkpoint(_resolve(args.base, ckdir))
        branch_ckpt = load_checkpoint(_resolve(args.branch, ckdir))
        records = load_manifest(Path(args.bench) / "manifest.jsonl")
        sampler = SamplerConfig(
            steps=args.steps or _cfg_get(cfg, "steps", int, 50),
            guidance_scale=_cfg_get(cfg, "guidance_scale", float, 7.5),
            seed=seed,
        )
        pipelines = standard_pipelines(base_ckpt, branch_ckpt, codec, sampler, args.blend)
        report = run_benchmark(pipelines, records, args.bench, codec, {"seed": seed})
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "benchmark.csv")
        report.write_json(out_dir / "benchmark.json")
        failed = report.aggregates()["failed_rows"]
        print(f"wrote {out_dir}/benchmark.csv ({len(report.rows)} rows, {failed} failed)")
        return 1 if failed else 0

    if args.command == "ablate":
        from .benchmark import run_ablation

        torch.set_num_threads(1)
        codec = build_codec(load_checkpoint(_resolve(args.codec, ckdir)))
        base_ckpt = load_checkpoint(_resolve(args.base, ckdir))
        records = load_manifest(Path(args.data) / "manifest.jsonl")
        bench = load_manifest(Path(args.bench) / "manifest.jsonl")
        report = run_ablation(
            base_ckpt, records, bench, args.data, args.bench, codec,
            budget=args.budget, seed=seed, sampler=SamplerConfig(steps=args.steps, seed=seed),
        )
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "ablation.csv")
        failed = sum(1 for r in report.rows if r.failed)
        print(f"wrote {out_dir}/ablation.csv ({len(report.rows)} rows, {failed} failed)")
        return 1 if failed else 0

    if args.command == "serve":
        from .service import serve

        serve(
            args.host,
            args.port,
            _resolve(args.codec, ckdir),
            _named_paths(args.base, ckdir),
            _named_paths(args.branch, ckdir),
        )
        return 0

    raise SystemExit(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
