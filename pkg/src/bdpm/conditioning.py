"""Conditioning tensors for super-resolution and inpainting, plus augmentation.

Super-resolution conditions are built by strided downsampling (every
factor-th pixel, offset 0) followed by bilinear upsampling back to the
original size and bit-plane decomposition.  Inpainting conditions are the
bit-planes of the image with every bit under the mask replaced by a fair
coin, plus the mask itself as one extra binary plane (1 = missing).

Bilinear geometry is fixed so conditions are bit-reproducible: source
coordinates use the align-corners-false convention, edges are clamped, and
values quantize to 8 bits by rounding half away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bdpm.bitplanes import BitPlanes, decompose, validate_image
from bdpm.rng import bernoulli

TASK_SR = "sr"
TASK_INPAINT = "inpaint"


@dataclass(frozen=True)
class Conditioning:
    """Encoded condition: bit-planes plus an optional mask plane."""

    planes: np.ndarray      # uint8 (channels * depth, h, w)
    mask: np.ndarray | None  # uint8 (h, w), 1 = missing
    task: str
    channels: int
    depth: int = 8

    def __post_init__(self):
        if self.task not in (TASK_SR, TASK_INPAINT):
            raise ValueError(f"unknown task {self.task!r}")
        if (self.mask is not None) != (self.task == TASK_INPAINT):
            raise ValueError("mask plane is present iff the task is inpainting")
        if self.planes.shape[0] != self.channels * self.depth:
            raise ValueError("condition plane count does not match channels * depth")
        if self.mask is not None and self.mask.shape != self.planes.shape[1:]:
            raise ValueError("mask and condition spatial shapes must match")

    @property
    def n_input_planes(self) -> int:
        return self.planes.shape[0] + (0 if self.mask is None else 1)

    def stacked(self) -> np.ndarray:
        """Condition planes with the mask appended, ready as model input."""
        if self.mask is None:
            return self.planes
        return np.concatenate([self.planes, self.mask[None]], axis=0)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Edge-clamped bilinear resize of a (c, h, w) uint8 image.

    align-corners-false sampling; quantization rounds half away from zero.
    """
    image = validate_image(image)
    _, in_h, in_w = image.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    src = image.astype(np.float64)

    def axis_coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0.0, n_in - 1.0)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = axis_coords(out_h, in_h)
    x0, x1, fx = axis_coords(out_w, in_w)
    top = src[:, y0][:, :, x0] * (1 - fx) + src[:, y0][:, :, x1] * fx
    bot = src[:, y1][:, :, x0] * (1 - fx) + src[:, y1][:, :, x1] * fx
    out = top * (1 - fy[None, :, None]) + bot * fy[None, :, None]
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def build_sr_condition(image: np.ndarray, factor: int = 4) -> Conditioning:
    """Strided downsample by ``factor`` then bilinear upsample and decompose."""
    image = validate_image(image)
    channels, height, width = image.shape
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if height % factor or width % factor:
        raise ValueError(
            f"image size {height}x{width} is not divisible by factor {factor}"
        )
    low = image[:, ::factor, ::factor]
    upsampled = resize_bilinear(low, height, width)
    planes = decompose(upsampled)
    return Conditioning(planes.bits, None, TASK_SR, channels, planes.depth)


@dataclass(frozen=True)
class MaskSpec:
    """A binary mask (1 = missing) with its exact coverage and provenance."""

    mask: np.ndarray
    coverage: float
    generator: str
    provenance: tuple | None = None


def generate_mask(
    height: int,
    width: int,
    rng: np.random.Generator,
    coverage_band: tuple[float, float] = (0.10, 0.30),
    max_attempts: int = 200,
    provenance: tuple | None = None,
) -> MaskSpec:
    """Union of random axis-aligned rectangles with coverage inside the band.

    Rectangles accumulate until coverage reaches the lower edge; an attempt
    that overshoots the upper edge restarts.  Degenerate sizes that cannot
    land in the band exhaust ``max_attempts`` and raise.
    """
    lo, hi = coverage_band
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"coverage band must satisfy 0 < lo <= hi <= 1, got {coverage_band}")
    total = height * width
    side_lo_h = max(1, round(0.10 * height))
    side_hi_h = max(side_lo_h, round(0.45 * height))
    side_lo_w = max(1, round(0.10 * width))
    side_hi_w = max(side_lo_w, round(0.45 * width))
    for _ in range(max_attempts):
        mask = np.zeros((height, width), dtype=np.uint8)
        coverage = 0.0
        for _ in range(10_000):
            rh = int(rng.integers(side_lo_h, side_hi_h + 1))
            rw = int(rng.integers(side_lo_w, side_hi_w + 1))
            top = int(rng.integers(0, height - rh + 1))
            left = int(rng.integers(0, width - rw + 1))
            mask[top : top + rh, left : left + rw] = 1
            coverage = mask.sum() / total
            if coverage >= lo:
                break
        if lo <= coverage <= hi:
            return MaskSpec(mask, float(coverage), "rectangles", provenance)
    raise ValueError(
        f"could not reach coverage band {coverage_band} on a {height}x{width} mask"
    )


def build_inpaint_condition(
    image: np.ndarray, mask: np.ndarray | MaskSpec, rng: np.random.Generator
) -> Conditioning:
    """Bit-planes of the image with masked-pixel bits replaced by fair coins."""
    image = validate_image(image)
    if isinstance(mask, MaskSpec):
        mask = mask.mask
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.shape != image.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[1:]}")
    if mask.size and mask.max() > 1:
        raise ValueError("mask must contain only 0 and 1")
    planes = decompose(image)
    bits = planes.bits.copy()
    missing = mask.astype(bool)
    n_missing = int(missing.sum())
    if n_missing:
        fill = bernoulli(rng, 0.5, (bits.shape[0], n_missing))
        bits[:, missing] = fill
    return Conditioning(bits, mask, TASK_INPAINT, planes.channels, planes.depth)


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    crop_min: float = 0.8,
    crop_max: float = 1.0,
    flip: bool = True,
) -> np.ndarray:
    """Random crop (fraction per axis) resized back, then 50% horizontal flip.

    Draw order is fixed (crop fractions, offsets, flip coin) so the result
    is a pure function of the generator state.
    """
    image = validate_image(image)
    if not (0.0 < crop_min <= crop_max <= 1.0):
        raise ValueError("crop fractions must satisfy 0 < min <= max <= 1")
    _, height, width = image.shape
    frac_h = rng.uniform(crop_min, crop_max)
    frac_w = rng.uniform(crop_min, crop_max)
    crop_h = max(1, round(frac_h * height))
    crop_w = max(1, round(frac_w * width))
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    out = image[:, top : top + crop_h, left : left + crop_w]
    if (crop_h, crop_w) != (height, width):
        out = resize_bilinear(out, height, width)
    if flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)
