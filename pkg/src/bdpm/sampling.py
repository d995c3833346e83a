"""Reverse process: iterative predict, binarize, and XOR re-noise.

The chain starts from fair-coin bits at t = T and walks a descending subset
of timesteps.  At each selected t the denoiser predicts the clean planes,
the prediction is thresholded to bits, and (except at the final step) the
state is re-noised at the NEXT selected timestep's flip probability, so the
noise level always matches the timestep the denoiser is told.  The final
prediction is recomposed to an 8-bit image without a residual XOR.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from bdpm.bitplanes import BitPlanes, recompose
from bdpm.conditioning import Conditioning
from bdpm.model import binarize
from bdpm.netpbm import write_pnm
from bdpm.noise import NoiseSchedule, apply_noise, sample_noise
from bdpm.rng import SAMPLER, bernoulli, stream


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs of the reverse process."""

    steps: int = 30
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def select_timesteps(steps: int, total_steps: int) -> np.ndarray:
    """Descending timestep subset: steps+1 evenly spaced values on [0, T].

    Values are rounded to integers and deduplicated; the result always
    contains both total_steps and 0.
    """
    if not 1 <= steps <= total_steps + 1:
        raise ValueError(f"steps must lie in [1, {total_steps + 1}], got {steps}")
    grid = np.rint(np.linspace(total_steps, 0, steps + 1)).astype(np.int64)
    selected = np.unique(grid)[::-1]
    return selected


class _Diagnostics:
    """Optional per-step dump: intermediate predictions plus flip rates."""

    def __init__(self, directory: str, channels: int):
        os.makedirs(directory, exist_ok=True)
        self.directory = directory
        self.ext = "pgm" if channels == 1 else "ppm"
        self.rows: list[dict] = []

    def record(self, index, t, image, predicted_rate, t_next, applied_rate, beta_next):
        name = f"step_{index:03d}_t{t:04d}.{self.ext}"
        write_pnm(os.path.join(self.directory, name), image)
        self.rows.append(
            {
                "step": index,
                "t": t,
                "t_next": "" if t_next is None else t_next,
                "beta_next": "" if beta_next is None else f"{beta_next:.8f}",
                "predicted_flip_rate": f"{predicted_rate:.6f}",
                "applied_flip_rate": "" if applied_rate is None else f"{applied_rate:.6f}",
            }
        )

    def close(self):
        path = os.path.join(self.directory, "steps.csv")
        fields = ["step", "t", "t_next", "beta_next", "predicted_flip_rate", "applied_flip_rate"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(self.rows)


def sample(
    denoise,
    schedule: NoiseSchedule,
    condition: Conditioning,
    config: SamplerConfig,
    rng: np.random.Generator | None = None,
    diagnostics_dir: str | None = None,
) -> np.ndarray:
    """Run the reverse chain for one condition and return an 8-bit image.

    ``denoise(x_bits, t, cond_bits) -> (x0_logits, z_logits)`` operates on
    single-image numpy arrays.  Deterministic given the rng (defaults to a
    fresh stream keyed by ``config.seed``).
    """
    if config.steps > schedule.total_steps:
        raise ValueError(
            f"steps must be <= total_steps={schedule.total_steps}, got {config.steps}"
        )
    if rng is None:
        rng = stream(config.seed, SAMPLER)
    n_planes = condition.channels * condition.depth
    h, w = condition.planes.shape[1:]
    cond_bits = condition.stacked()
    selected = select_timesteps(config.steps, schedule.total_steps)
    diag = _Diagnostics(diagnostics_dir, condition.channels) if diagnostics_dir else None

    x = bernoulli(rng, 0.5, (n_planes, h, w))
    x0 = x
    for i, t in enumerate(selected):
        x0_logits, z_logits = denoise(x, int(t), cond_bits)
        if not np.isfinite(x0_logits).all() or not np.isfinite(z_logits).all():
            raise ValueError(f"denoiser produced non-finite logits at t={int(t)}")
        x0 = binarize(x0_logits, config.threshold)
        t_next = beta_next = applied_rate = None
        if t > 0:
            t_next = int(selected[i + 1])
            draw = sample_noise(schedule, t_next, x0.shape, rng)
            beta_next = draw.beta
            applied_rate = float(draw.z.mean())
            x = apply_noise(x0, draw.z)
        if diag is not None:
            image = recompose(BitPlanes(x0, condition.channels, condition.depth))
            diag.record(
                i, int(t), image,
                float(binarize(z_logits, config.threshold).mean()),
                t_next, applied_rate, beta_next,
            )
    if diag is not None:
        diag.close()
    return recompose(BitPlanes(x0, condition.channels, condition.depth))


@dataclass(frozen=True)
class BatchItem:
    """Outcome of one batch entry: an image or a recorded failure."""

    index: int
    seed: int
    image: np.ndarray | None
    error: str | None = None


def sample_batch(
    denoise,
    schedule: NoiseSchedule,
    conditions: list[Conditioning],
    config: SamplerConfig,
    seeds: list[int] | None = None,
) -> list[BatchItem]:
    """Independent sample() calls, one per condition, with per-item seeds.

    Results depend only on each (condition, seed) pair, never on batch
    order.  Failures are captured per item instead of aborting the batch.
    """
    if seeds is None:
        seeds = [config.seed + i for i in range(len(conditions))]
    if len(seeds) != len(conditions):
        raise ValueError(
            f"got {len(seeds)} seeds for {len(conditions)} conditions"
        )
    items = []
    for i, (condition, seed) in enumerate(zip(conditions, seeds)):
        try:
            image = sample(denoise, schedule, condition, config, rng=stream(seed, SAMPLER))
            items.append(BatchItem(i, seed, image))
        except (ValueError, RuntimeError) as exc:
            items.append(BatchItem(i, seed, None, str(exc)))
    return items
