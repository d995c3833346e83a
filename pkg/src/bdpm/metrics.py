"""Image quality metrics: PSNR, single-scale SSIM, and per-plane bit errors.

PSNR on multi-channel images uses one MSE over all channels jointly.  SSIM
is the uniform-window single-scale variant evaluated on BT.601 luma for RGB
(so cross-implementation SSIM numbers are not directly comparable; the
variant here is fixed and documented).  Identical images report PSNR as
+inf in memory and are capped at 99 dB when written to CSV.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bdpm.bitplanes import validate_image

PSNR_CSV_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """10 log10(peak^2 / MSE) in dB; +inf when the images are identical."""
    validate_image(a)
    validate_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _luma(image: np.ndarray) -> np.ndarray:
    """BT.601 luma for RGB, the sole channel for grayscale (float64)."""
    if image.shape[0] == 1:
        return image[0].astype(np.float64)
    r, g, b = image.astype(np.float64)
    return 0.299 * r + 0.587 * g + 0.114 * b


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over all valid uniform windows on the luma channel.

    Population (1/N) moments inside each window; C1 = (k1 * 255)^2 and
    C2 = (k2 * 255)^2.  Result lies in (-1, 1], with 1.0 iff identical.
    """
    validate_image(a)
    validate_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape[1:]
    if window < 1 or window > min(h, w):
        raise ValueError(f"window must lie in [1, {min(h, w)}], got {window}")
    xa, xb = _luma(a), _luma(b)
    c1 = (k1 * 255.0) ** 2
    c2 = (k2 * 255.0) ** 2
    wa = sliding_window_view(xa, (window, window))
    wb = sliding_window_view(xb, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def bit_error_rate(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-plane fraction of differing bits between two (planes, h, w) stacks."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ValueError(f"expected (planes, h, w), got {a.shape}")
    for name, bits in (("a", a), ("b", b)):
        if bits.dtype != np.uint8 or bits.max(initial=0) > 1:
            raise ValueError(f"{name} must be uint8 bits in {{0, 1}}")
    return np.bitwise_xor(a, b).mean(axis=(1, 2), dtype=np.float64)


def _cap(value: float) -> float:
    return min(float(value), PSNR_CSV_CAP)


@dataclass
class EvalReport:
    """Per-image metric rows plus recomputable means.

    Every row is a dict with the same keys; "index" identifies the image
    and every other value is numeric.  Means are always the arithmetic
    mean of the per-image values, never tracked separately.
    """

    steps: int
    wallclock: float = 0.0
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        if self.rows and set(row) != set(self.rows[0]):
            raise ValueError("row keys must match the existing rows")
        self.rows.append(row)

    def means(self) -> dict:
        """Arithmetic mean of every numeric column over the rows."""
        if not self.rows:
            return {}
        keys = [k for k in self.rows[0] if k != "index"]
        return {k: float(np.mean([row[k] for row in self.rows])) for k in keys}

    def write_csv(self, path) -> None:
        """Per-image rows then a final mean row; PSNR capped at 99 dB."""
        fields = list(self.rows[0]) if self.rows else ["index"]
        means = self.means()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields + ["steps", "wallclock_s"])
            for row in self.rows:
                out = [row[k] if k == "index" else f"{_cap(row[k]):.6f}" for k in fields]
                writer.writerow(out + [self.steps, f"{self.wallclock:.3f}"])
            mean_row = ["mean"] + [f"{_cap(means[k]):.6f}" for k in fields if k != "index"]
            writer.writerow(mean_row + [self.steps, f"{self.wallclock:.3f}"])
