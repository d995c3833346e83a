"""Command-line harness: train, sample, eval, codec-check, step-sweep.

Exit codes: 0 success, 2 usage, 3 config errors, 4 missing files,
5 invariant violations (failed checks, bad checkpoints, diverged runs).
``BDPM_THREADS`` caps the torch thread count.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np
import torch

from bdpm.bitplanes import decompose, pack_bits, recompose, unpack_bits
from bdpm.config import RunConfig, load_run_config, save_run_config
from bdpm.datasets import load_dataset
from bdpm.model import as_inference_fn
from bdpm.netpbm import write_pnm
from bdpm.noise import NoiseSchedule
from bdpm.pipeline import eval_condition, evaluate, prepare_datasets, train_run
from bdpm.rng import EVAL, stream
from bdpm.sampling import sample
from bdpm.training import CheckpointError, TrainStepError, ema_model, load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_INVARIANT = 5

SWEEP_STEPS = (1, 2, 5, 10, 20, 30, 50, 100)


class ConfigError(ValueError):
    """A run config that failed to parse or validate."""


def _load_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "steps", None) is not None:
        key = "train.steps" if args.command == "train" else "sampler.steps"
        overrides.append(f"{key}={args.steps}")
    if getattr(args, "threshold", None) is not None:
        overrides.append(f"sampler.threshold={args.threshold}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    if not os.path.exists(args.config):
        raise FileNotFoundError(f"config file {args.config} does not exist")
    try:
        return load_run_config(args.config, overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _trained_model(config: RunConfig):
    path = os.path.join(config.out_dir, "checkpoint.bin")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint at {path}; run train first")
    return ema_model(load_checkpoint(path))


def cmd_train(args) -> int:
    config = _load_config(args)
    state, report = train_run(config)
    print(f"trained to step {state.step}; artifacts in {config.out_dir}")
    if report is not None:
        means = report.means()
        print(f"eval: psnr {means['psnr']:.3f} dB (baseline {means['baseline_psnr']:.3f}), "
              f"ssim {means['ssim']:.4f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    config = _load_config(args)
    model = _trained_model(config)
    denoise = as_inference_fn(model)
    schedule = NoiseSchedule(
        config.train.diffusion_steps, config.train.beta_start, config.train.beta_end
    )
    _, eval_ds = prepare_datasets(config)
    count = min(args.count, len(eval_ds))
    out_dir = os.path.join(config.out_dir, "samples")
    os.makedirs(out_dir, exist_ok=True)
    save_run_config(config, os.path.join(out_dir, "config.resolved"))
    ext = "pgm" if config.channels == 1 else "ppm"
    for i in range(count):
        condition = eval_condition(eval_ds.images[i], config, i)
        diag = os.path.join(out_dir, "diagnostics") if args.diagnostics and i == 0 else None
        image = sample(denoise, schedule, condition, config.sampler,
                       rng=stream(config.seed, EVAL, i, 2), diagnostics_dir=diag)
        write_pnm(os.path.join(out_dir, f"sample_{i:05d}.{ext}"), image)
    print(f"wrote {count} samples to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args)
    model = _trained_model(config)
    _, eval_ds = prepare_datasets(config)
    report = evaluate(model, eval_ds, config)
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "eval.csv")
    report.write_csv(path)
    save_run_config(config, os.path.join(config.out_dir, "config.resolved"))
    means = report.means()
    print(f"eval over {len(report.rows)} images at S={report.steps}: "
          f"psnr {means['psnr']:.3f} dB (baseline {means['baseline_psnr']:.3f}), "
          f"ssim {means['ssim']:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_codec_check(args) -> int:
    rng = stream(args.seed, EVAL)
    ok = True
    values = np.arange(256, dtype=np.uint8).reshape(1, 16, 16)
    exact = bool(np.array_equal(recompose(decompose(values)), values))
    ok &= exact
    print(f"codec-check: exhaustive 256 pixel values {'PASS' if exact else 'FAIL'}")

    shape = (args.channels, args.size, args.size)
    failures = 0
    for _ in range(args.images):
        image = rng.integers(0, 256, size=shape, dtype=np.uint8)
        planes = decompose(image)
        packed = unpack_bits(pack_bits(planes.bits), planes.bits.shape)
        if not np.array_equal(recompose(planes), image) or not np.array_equal(packed, planes.bits):
            failures += 1
    ok &= failures == 0
    print(f"codec-check: {args.images} random {args.size}x{args.size}x{args.channels} "
          f"images {'PASS' if failures == 0 else f'FAIL ({failures} bad)'}")

    if args.data:
        ds = load_dataset(args.data)
        bad = sum(
            not np.array_equal(recompose(decompose(img)), img) for img in ds.images
        )
        ok &= bad == 0
        print(f"codec-check: {len(ds)} corpus images {'PASS' if bad == 0 else f'FAIL ({bad} bad)'}")

    print(f"codec-check: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_step_sweep(args) -> int:
    config = _load_config(args)
    model = _trained_model(config)
    _, eval_ds = prepare_datasets(config)
    if args.count:
        eval_ds = replace(eval_ds, images=eval_ds.images[: args.count],
                          manifest=eval_ds.manifest[: args.count])
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "step_sweep.csv")
    total = config.train.diffusion_steps
    rows = []
    for steps in SWEEP_STEPS:
        if steps > total:
            continue
        report = evaluate(model, eval_ds, config, steps=steps)
        means = report.means()
        rows.append((steps, means["psnr"], means["ssim"], means["baseline_psnr"],
                     report.wallclock))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["steps", "mean_psnr", "mean_ssim", "mean_baseline_psnr", "wallclock_s"])
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
    print(f"{'steps':>5}  {'psnr':>8}  {'ssim':>7}")
    for steps, p, s, _, _ in rows:
        print(f"{steps:>5}  {min(p, 99.0):>8.3f}  {s:>7.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdpm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps_help):
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--steps", type=int, help=steps_help)
        p.add_argument("--threshold", type=float, help="binarization threshold")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("train", help="train a model and evaluate it")
    common(p, "training step budget")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample images from a trained model")
    common(p, "sampling steps")
    p.add_argument("--count", type=int, default=8, help="images to sample")
    p.add_argument("--diagnostics", action="store_true",
                   help="dump per-step predictions for the first image")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="score a trained model on the eval split")
    common(p, "sampling steps")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("codec-check", help="bit-plane round-trip checks")
    p.add_argument("--images", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", help="also round-trip every image in this dataset dir")
    p.set_defaults(fn=cmd_codec_check)

    p = sub.add_parser("step-sweep", help="evaluate across sampling step counts")
    common(p, "ignored; the sweep sets its own step counts")
    p.add_argument("--count", type=int, help="limit the eval images used")
    p.set_defaults(fn=cmd_step_sweep)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("BDPM_THREADS", "")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"bdpm: BDPM_THREADS={threads!r} is not an integer", file=sys.stderr)
            return EXIT_USAGE
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"bdpm: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"bdpm: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError, TrainStepError, ValueError) as exc:
        print(f"bdpm: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
