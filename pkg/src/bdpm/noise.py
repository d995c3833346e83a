"""Quadratic flip-probability schedule and the XOR forward process.

The flip probability at timestep t is

    beta_t = (sqrt(beta_start) + (t / T) * (sqrt(beta_end) - sqrt(beta_start)))**2

precomputed once in double precision for t = 0..T.  The two endpoints are
pinned to beta_start and beta_end exactly; the formula reproduces them to
within one ulp but can overshoot beta_end by a rounding step, which would
break the [0, 0.5] range contract.

Noising is elementwise XOR with a Bernoulli(beta_t) mask, applied directly
to the clean bits: beta_t is the marginal flip probability at t, there is
no compounding chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bdpm.rng import bernoulli


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed flip probabilities for t = 0..total_steps."""

    total_steps: int = 1000
    beta_start: float = 1e-5
    beta_end: float = 0.5
    betas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 < self.beta_start < self.beta_end:
            raise ValueError(
                f"need 0 < beta_start < beta_end, got {self.beta_start}, {self.beta_end}"
            )
        if self.beta_end > 0.5:
            raise ValueError(f"beta_end must be <= 0.5, got {self.beta_end}")
        t = np.arange(self.total_steps + 1, dtype=np.float64)
        root = np.sqrt(self.beta_start) + (t / self.total_steps) * (
            np.sqrt(self.beta_end) - np.sqrt(self.beta_start)
        )
        betas = root * root
        betas[0] = self.beta_start
        betas[-1] = self.beta_end
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    def beta(self, t: int) -> float:
        """Flip probability at timestep t."""
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"timestep {t} outside [0, {self.total_steps}]")
        return float(self.betas[t])


@dataclass(frozen=True)
class NoiseDraw:
    """A sampled noise mask plus where it came from."""

    z: np.ndarray
    t: int
    beta: float
    provenance: tuple | None = None


def sample_noise(
    schedule: NoiseSchedule,
    t: int,
    shape: tuple[int, ...],
    rng: np.random.Generator,
    plane_scale: np.ndarray | None = None,
    provenance: tuple | None = None,
) -> NoiseDraw:
    """Draw an iid Bernoulli(beta_t) mask of the given shape.

    ``plane_scale`` optionally multiplies the flip probability per leading
    plane (clipped back into [0, 0.5]); the default is a plane-independent
    schedule.
    """
    beta = schedule.beta(t)
    if plane_scale is None:
        p = beta
    else:
        plane_scale = np.asarray(plane_scale, dtype=np.float64)
        if plane_scale.shape != (shape[0],):
            raise ValueError(
                f"plane_scale must have shape ({shape[0]},), got {plane_scale.shape}"
            )
        p = np.clip(beta * plane_scale, 0.0, 0.5).reshape(
            (shape[0],) + (1,) * (len(shape) - 1)
        )
    z = bernoulli(rng, p, shape)
    return NoiseDraw(z=z, t=t, beta=beta, provenance=provenance)


def apply_noise(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """XOR a bit tensor with a noise mask of the same shape."""
    x = np.asarray(x)
    z = np.asarray(z)
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs z {z.shape}")
    if x.dtype != np.uint8 or z.dtype != np.uint8:
        raise ValueError("bit tensors must be uint8")
    if (x.size and x.max() > 1) or (z.size and z.max() > 1):
        raise ValueError("bit tensors must contain only 0 and 1")
    return np.bitwise_xor(x, z)
