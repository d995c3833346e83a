"""Procedural desk-scale image corpora and the dataset directory format.

Generators produce 8-bit images with enough tonal range that the low
bit-planes are nontrivial: linear gradients, anti-aliased discs on shaded
backgrounds, shaded checkerboards, and band-limited noise.  Every image is
a pure function of (seed, split, index), recorded in the manifest.

On disk a dataset is a directory of PGM/PPM files plus ``manifest.jsonl``,
one JSON record per line with at least path, split, seed, and kind.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from bdpm.conditioning import resize_bilinear
from bdpm.netpbm import read_pnm, write_pnm
from bdpm.rng import DATASET, stream

KINDS = ("gradient", "disc", "checker", "bandnoise")
_SPLIT_IDS = {"train": 0, "eval": 1, "test": 2}


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = np.arange(size, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="ij")


def _shade(size: int, rng: np.random.Generator, span: float = 255.0) -> np.ndarray:
    """Random linear field over [0, span], used as base shading."""
    yy, xx = _coords(size)
    gy, gx = rng.uniform(-1.0, 1.0, size=2)
    f = gy * yy + gx * xx
    f = f - f.min()
    peak = f.max()
    if peak > 0:
        f = f / peak
    return f * span


def _to_channels(field2d: np.ndarray, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Lift a [0,255] field to channels with per-channel offset and gain."""
    out = np.empty((channels,) + field2d.shape, dtype=np.float64)
    for c in range(channels):
        gain = rng.uniform(0.6, 1.0)
        offset = rng.uniform(0.0, 255.0 * (1.0 - gain))
        out[c] = field2d * gain + offset
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def make_image(kind: str, size: int, channels: int, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """One procedural image plus the manifest fields describing it."""
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    params: dict = {}
    if kind == "gradient":
        base = _shade(size, rng)
    elif kind == "disc":
        base = _shade(size, rng, span=rng.uniform(80.0, 180.0))
        yy, xx = _coords(size)
        radius = rng.uniform(size / 6, size / 3)
        cy = rng.uniform(radius, size - radius)
        cx = rng.uniform(radius, size - radius)
        level = rng.uniform(0.0, 255.0)
        dist = np.hypot(yy - cy, xx - cx)
        alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)  # 1 px soft edge
        base = base * (1 - alpha) + level * alpha
        params = {"cy": cy, "cx": cx, "radius": radius, "level": level}
    elif kind == "checker":
        period = int(rng.integers(4, max(5, size // 2 + 1)))
        phase_y = int(rng.integers(0, period))
        phase_x = int(rng.integers(0, period))
        lo, hi = sorted(rng.uniform(0.0, 255.0, size=2))
        yy, xx = _coords(size)
        cells = (((yy + phase_y) // period + (xx + phase_x) // period) % 2).astype(np.float64)
        base = lo + cells * (hi - lo) + _shade(size, rng, span=40.0)
        base = np.clip(base, 0.0, 255.0)
        params = {"period": period, "lo": lo, "hi": hi}
    elif kind == "bandnoise":
        coarse = rng.uniform(0.0, 255.0, size=(1, max(2, size // 4), max(2, size // 4)))
        coarse = np.clip(np.floor(coarse + 0.5), 0, 255).astype(np.uint8)
        base = resize_bilinear(coarse, size, size)[0].astype(np.float64)
    else:
        raise ValueError(f"unknown image kind {kind!r}")
    return _to_channels(base, channels, rng), params


@dataclass
class SynthDataset:
    """In-memory list of images with a reproducibility manifest."""

    images: list[np.ndarray]
    manifest: list[dict]
    seed: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> np.ndarray:
        return self.images[index]


def synth_dataset(
    kind: str,
    count: int,
    size: int,
    channels: int = 3,
    seed: int = 0,
    split: str = "train",
) -> SynthDataset:
    """Generate a reproducible corpus; kind "mixed" cycles all generators."""
    if kind != "mixed" and kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS + ('mixed',)}, got {kind!r}")
    if split not in _SPLIT_IDS:
        raise ValueError(f"split must be one of {tuple(_SPLIT_IDS)}, got {split!r}")
    images, manifest = [], []
    for i in range(count):
        item_kind = KINDS[i % len(KINDS)] if kind == "mixed" else kind
        rng = stream(seed, DATASET, _SPLIT_IDS[split], i)
        image, params = make_image(item_kind, size, channels, rng)
        images.append(image)
        manifest.append(
            {
                "index": i,
                "kind": item_kind,
                "split": split,
                "seed": seed,
                "size": size,
                "channels": channels,
                "params": params,
            }
        )
    return SynthDataset(images, manifest, seed, split)


def save_dataset(directory, dataset: SynthDataset) -> None:
    """Write images as PGM/PPM plus manifest.jsonl."""
    os.makedirs(directory, exist_ok=True)
    ext = "pgm" if dataset.images and dataset.images[0].shape[0] == 1 else "ppm"
    with open(os.path.join(directory, "manifest.jsonl"), "w") as fh:
        for record, image in zip(dataset.manifest, dataset.images):
            name = f"{dataset.split}_{record['index']:05d}.{ext}"
            write_pnm(os.path.join(directory, name), image)
            fh.write(json.dumps({"path": name, **record}, sort_keys=True) + "\n")


def load_dataset(directory) -> SynthDataset:
    """Read a dataset directory written by :func:`save_dataset`."""
    manifest_path = os.path.join(directory, "manifest.jsonl")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no manifest.jsonl in {directory}")
    images, manifest = [], []
    with open(manifest_path) as fh:
        for line in fh:
            record = json.loads(line)
            images.append(read_pnm(os.path.join(directory, record["path"])))
            manifest.append(record)
    seed = manifest[0]["seed"] if manifest else 0
    split = manifest[0]["split"] if manifest else "train"
    return SynthDataset(images, manifest, seed, split)
