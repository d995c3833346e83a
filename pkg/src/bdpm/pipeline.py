"""End-to-end runs: data preparation, batch assembly, training, evaluation.

Every stochastic choice is drawn from a stream keyed by (seed, purpose,
step or item index), so batches are pure functions of the training step,
eval conditions are pure functions of the image index, and a resumed run
replays the trajectory the uninterrupted run would have taken.
"""

from __future__ import annotations

import os
import time
from dataclasses import replace

import numpy as np

from bdpm.bitplanes import BitPlanes, decompose, recompose
from bdpm.conditioning import (
    Conditioning,
    augment,
    build_inpaint_condition,
    build_sr_condition,
    generate_mask,
)
from bdpm.config import RunConfig, save_run_config
from bdpm.datasets import SynthDataset, load_dataset, synth_dataset
from bdpm.metrics import EvalReport, bit_error_rate, psnr, ssim
from bdpm.model import Denoiser, as_inference_fn
from bdpm.netpbm import write_pnm
from bdpm.noise import NoiseSchedule
from bdpm.rng import AUGMENT, BATCH, CONDITION, EVAL, MASK, stream
from bdpm.sampling import sample
from bdpm.training import MetricsLog, ema_model, fit, resume_or_init, save_checkpoint


def prepare_datasets(config: RunConfig) -> tuple[SynthDataset, SynthDataset]:
    """Load train/eval splits from dataset_dir, or synthesize them."""
    if config.dataset_dir:
        train = load_dataset(os.path.join(config.dataset_dir, "train"))
        eval_ = load_dataset(os.path.join(config.dataset_dir, "eval"))
    else:
        train = synth_dataset(
            config.dataset_kind, config.train_count, config.image_size,
            config.channels, config.seed, "train",
        )
        eval_ = synth_dataset(
            config.dataset_kind, config.eval_count, config.image_size,
            config.channels, config.seed, "eval",
        )
    for name, ds in (("train", train), ("eval", eval_)):
        if not len(ds):
            raise ValueError(f"{name} split is empty")
        shape = ds.images[0].shape
        if shape != (config.channels, config.image_size, config.image_size):
            raise ValueError(f"{name} images are {shape}, config wants "
                             f"({config.channels}, {config.image_size}, {config.image_size})")
    return train, eval_


def _condition_for(image: np.ndarray, config: RunConfig, rng_mask, rng_fill) -> Conditioning:
    if config.task == "inpaint":
        h, w = image.shape[1:]
        spec = generate_mask(h, w, rng_mask, (config.mask_lo, config.mask_hi))
        return build_inpaint_condition(image, spec.mask, rng_fill)
    return build_sr_condition(image, config.sr_factor)


def make_batch_fn(config: RunConfig, dataset: SynthDataset):
    """Batches as a pure function of the global step index."""
    seed = config.train.seed
    crop_min = 0.8 if config.train.crop_augment else 1.0

    def batch_fn(step: int) -> dict:
        idx = stream(seed, BATCH, step).integers(0, len(dataset), size=config.train.batch_size)
        x0s, conds = [], []
        for j, i in enumerate(idx):
            image = dataset.images[int(i)]
            if config.train.crop_augment or config.train.flip_augment:
                image = augment(
                    image, stream(seed, AUGMENT, step, j),
                    crop_min=crop_min, crop_max=1.0, flip=config.train.flip_augment,
                )
            cond = _condition_for(
                image, config, stream(seed, MASK, step, j), stream(seed, CONDITION, step, j)
            )
            x0s.append(decompose(image).bits)
            conds.append(cond.stacked())
        return {"x0": np.stack(x0s), "cond": np.stack(conds)}

    return batch_fn


def eval_condition(image: np.ndarray, config: RunConfig, index: int) -> Conditioning:
    """The fixed per-image condition used for every evaluation pass."""
    return _condition_for(
        image, config, stream(config.seed, EVAL, index, 0), stream(config.seed, EVAL, index, 1)
    )


def copy_condition_baseline(condition: Conditioning) -> np.ndarray:
    """The no-model answer: recompose the condition planes as the output."""
    return recompose(BitPlanes(condition.planes, condition.channels, condition.depth))


def _masked_msb_ber(truth_bits, out_bits, mask, channels: int, depth: int = 8) -> float:
    """Bit-error rate over masked pixels, MSB plane of each channel."""
    region = mask.astype(bool)
    if not region.any():
        return 0.0
    msb = np.arange(channels) * depth
    diff = np.bitwise_xor(truth_bits[msb][:, region], out_bits[msb][:, region])
    return float(diff.mean())


def evaluate(
    model: Denoiser,
    dataset: SynthDataset,
    config: RunConfig,
    steps: int | None = None,
    samples_dir: str | None = None,
) -> EvalReport:
    """Sample every eval image once and score it against the ground truth.

    Rows carry the model metrics, the copy-condition baseline metrics, and
    per-plane bit-error rates; for inpainting also the bit-error rate of
    the MSB planes restricted to the masked region.
    """
    sampler_cfg = config.sampler if steps is None else replace(config.sampler, steps=steps)
    schedule = NoiseSchedule(
        config.train.diffusion_steps, config.train.beta_start, config.train.beta_end
    )
    denoise = as_inference_fn(model)
    if samples_dir:
        os.makedirs(samples_dir, exist_ok=True)
    ext = "pgm" if config.channels == 1 else "ppm"
    report = EvalReport(steps=sampler_cfg.steps)
    start = time.perf_counter()
    for i, image in enumerate(dataset.images):
        condition = eval_condition(image, config, i)
        out = sample(denoise, schedule, condition, sampler_cfg,
                     rng=stream(config.seed, EVAL, i, 2))
        baseline = copy_condition_baseline(condition)
        truth_bits = decompose(image).bits
        out_bits = decompose(out).bits
        row = {
            "index": i,
            "psnr": psnr(image, out),
            "ssim": ssim(image, out),
            "baseline_psnr": psnr(image, baseline),
            "baseline_ssim": ssim(image, baseline),
        }
        if config.task == "inpaint":
            row["ber_msb_masked"] = _masked_msb_ber(
                truth_bits, out_bits, condition.mask, config.channels
            )
        for k, rate in enumerate(bit_error_rate(truth_bits, out_bits)):
            row[f"ber_plane_{k:02d}"] = float(rate)
        report.add(**row)
        if samples_dir:
            write_pnm(os.path.join(samples_dir, f"sample_{i:05d}.{ext}"), out)
    report.wallclock = time.perf_counter() - start
    return report


def train_run(config: RunConfig, checkpoint_every: int = 1000, evaluate_after: bool = True):
    """Full run: data, training to config.train.steps, EMA evaluation.

    Artifacts under config.out_dir: config.resolved, data/, checkpoint.bin,
    train_log.csv, eval.csv, samples/.  Returns (state, report); report is
    None when evaluate_after is false.
    """
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    save_run_config(config, os.path.join(out, "config.resolved"))
    train_ds, eval_ds = prepare_datasets(config)

    checkpoint_path = os.path.join(out, "checkpoint.bin")
    state = resume_or_init(config.model_config(), config.train, checkpoint_path)
    remaining = config.train.steps - state.step
    if remaining > 0:
        log = MetricsLog(os.path.join(out, "train_log.csv"))
        try:
            fit(state, make_batch_fn(config, train_ds), remaining,
                log=log, checkpoint_path=checkpoint_path, checkpoint_every=checkpoint_every)
        finally:
            log.close()
        save_checkpoint(state, checkpoint_path)

    report = None
    if evaluate_after:
        report = evaluate(ema_model(state), eval_ds, config,
                          samples_dir=os.path.join(out, "samples"))
        report.write_csv(os.path.join(out, "eval.csv"))
    return state, report
