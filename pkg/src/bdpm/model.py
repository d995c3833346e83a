"""Convolutional denoiser over noisy bit-planes.

The network maps (noisy bits, timestep, conditioning bits) to two logit
stacks of the same shape as the data planes: the first half of the output
channels predicts the clean bits, the second half predicts the applied
noise mask.  Conditioning enters as extra input channels; the timestep
enters as a sinusoidal embedding projected to per-channel additive biases
in every block.

Desk-scale architecture: a conv encoder-decoder with two stride-2
downsampling stages, channel widths (width, 2*width), 3x3 kernels, SiLU
gates, and one skip connection per resolution.  Hidden layers use
fan-in-scaled uniform init; the output head is zero-initialized so an
untrained model predicts probability 0.5 for every bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from bdpm.rng import INIT, stream


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor; fully determines every tensor shape."""

    data_planes: int
    cond_planes: int
    width: int = 32
    time_dim: int = 128

    def __post_init__(self):
        if self.data_planes < 1:
            raise ValueError(f"data_planes must be >= 1, got {self.data_planes}")
        if self.cond_planes < 0:
            raise ValueError(f"cond_planes must be >= 0, got {self.cond_planes}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError(f"time_dim must be even and >= 2, got {self.time_dim}")

    @property
    def input_planes(self) -> int:
        return self.data_planes + self.cond_planes

    def to_dict(self) -> dict:
        return {
            "data_planes": self.data_planes,
            "cond_planes": self.cond_planes,
            "width": self.width,
            "time_dim": self.time_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features [sin(t*w_i), cos(t*w_i)] over a geometric ladder.

    w_i = max_period**(-i / (dim/2)) for i = 0..dim/2-1, so t=0 maps to all
    sin components 0 and all cos components 1.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb.to(torch.float32)


class _Block(nn.Module):
    """Conv3x3 -> +timestep bias -> SiLU; stride 2 when downsampling."""

    def __init__(self, c_in: int, c_out: int, time_dim: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1, stride=stride)
        self.time_bias = nn.Linear(time_dim, c_out)

    def forward(self, x, temb):
        h = self.conv(x) + self.time_bias(temb)[:, :, None, None]
        return F.silu(h)


class Denoiser(nn.Module):
    """Predicts (clean-bit logits, noise-bit logits) from noisy bits."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w1 = config.width
        w2 = 2 * config.width
        td = config.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.stem = _Block(config.input_planes, w1, td)
        self.enc_a = _Block(w1, w1, td)
        self.down1 = _Block(w1, w2, td, stride=2)
        self.enc_b = _Block(w2, w2, td)
        self.down2 = _Block(w2, w2, td, stride=2)
        self.mid1 = _Block(w2, w2, td)
        self.mid2 = _Block(w2, w2, td)
        self.up2 = _Block(w2, w2, td)
        self.dec_b = _Block(w2 + w2, w2, td)
        self.up1 = _Block(w2, w1, td)
        self.dec_a = _Block(w1 + w1, w1, td)
        self.head = nn.Conv2d(w1, 2 * config.data_planes, 3, padding=1)

    def forward(self, x, t, cond=None):
        """x: (B, data_planes, H, W); t: (B,) integer; cond: (B, cond_planes, H, W)."""
        cfg = self.config
        if cfg.cond_planes and cond is None:
            raise ValueError("model was built with conditioning but none was given")
        if cond is not None and cfg.cond_planes:
            if cond.shape[-2:] != x.shape[-2:]:
                raise ValueError(
                    f"condition spatial shape {tuple(cond.shape[-2:])} does not match "
                    f"input {tuple(x.shape[-2:])}"
                )
            if cond.shape[1] != cfg.cond_planes:
                raise ValueError(
                    f"expected {cfg.cond_planes} condition planes, got {cond.shape[1]}"
                )
            x = torch.cat([x, cond], dim=1)
        if x.shape[1] != cfg.input_planes:
            raise ValueError(f"expected {cfg.input_planes} input planes, got {x.shape[1]}")
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ValueError(
                f"spatial dims must be divisible by 4, got {tuple(x.shape[-2:])}"
            )
        if torch.any(t < 0):
            raise ValueError("timesteps must be >= 0")

        temb = self.time_mlp(
            timestep_embedding(t, cfg.time_dim).to(self.head.weight.dtype)
        )
        h0 = self.stem(x, temb)
        a = self.enc_a(h0, temb)
        h = self.down1(a, temb)
        b = self.enc_b(h, temb)
        h = self.down2(b, temb)
        h = self.mid1(h, temb)
        h = self.mid2(h, temb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up2(h, temb)
        h = self.dec_b(torch.cat([h, b], dim=1), temb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up1(h, temb)
        h = self.dec_a(torch.cat([h, a], dim=1), temb)
        out = self.head(h)
        return out[:, : cfg.data_planes], out[:, cfg.data_planes :]


# Layer walk used for the receptive-field bound; mirrors Denoiser.forward.
_TOPOLOGY = (
    "conv", "conv", "down", "conv", "down", "conv", "conv",
    "up", "conv", "conv", "up", "conv", "conv", "conv",
)


def receptive_field_radius(config: ModelConfig) -> int:
    """Upper bound, in input pixels, on the output receptive-field radius."""
    radius, scale = 0, 1
    for kind in _TOPOLOGY:
        if kind == "conv":
            radius += scale
        elif kind == "down":
            radius += scale
            scale *= 2
        elif kind == "up":
            scale //= 2
            radius += scale  # nearest-neighbour alignment slack
    return radius


def init_parameters(model: Denoiser, seed: int) -> None:
    """Deterministically initialize parameters from the run seed.

    Weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at
    zero; the head conv is fully zero so sigma(logit) = 0.5 everywhere.
    """
    with torch.no_grad():
        for idx, (name, param) in enumerate(sorted(model.named_parameters())):
            if name.startswith("head.") or name.endswith("bias"):
                param.zero_()
                continue
            fan_in = int(np.prod(param.shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            rng = stream(seed, INIT, idx)
            values = rng.uniform(-bound, bound, size=tuple(param.shape))
            param.copy_(torch.from_numpy(values.astype(np.float32)))


def export_parameters(model: nn.Module) -> dict[str, np.ndarray]:
    """Named parameter tensors as float32 numpy arrays."""
    return {
        name: param.detach().cpu().numpy().astype(np.float32, copy=True)
        for name, param in model.named_parameters()
    }


def load_parameters(model: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    """Strict inverse of :func:`export_parameters`."""
    names = {name for name, _ in model.named_parameters()}
    if names != set(tensors):
        missing = names - set(tensors)
        extra = set(tensors) - names
        raise ValueError(f"parameter name mismatch: missing={missing} extra={extra}")
    with torch.no_grad():
        for name, param in model.named_parameters():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(np.ascontiguousarray(arr)))


def binarize(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold logits to bits: 1 iff sigma(logit) > threshold, strictly.

    sigma(l) > th  <=>  l > log(th / (1 - th)); comparing in logit space
    keeps the tie rule exact (logit 0 at threshold 0.5 gives bit 0).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    cut = math.log(threshold / (1.0 - threshold))
    return (np.asarray(logits) > cut).astype(np.uint8)


def as_inference_fn(model: Denoiser):
    """Wrap a model as denoiser(x_bits, t, cond_bits) -> (x0_logits, z_logits).

    Inputs and outputs are single-image numpy arrays (planes, h, w); the
    wrapper adds the batch dimension and runs without gradients.
    """
    def denoise(x_bits: np.ndarray, t: int, cond_bits: np.ndarray | None):
        with torch.no_grad():
            xt = torch.from_numpy(x_bits[None].astype(np.float32))
            ct = None
            if cond_bits is not None:
                ct = torch.from_numpy(cond_bits[None].astype(np.float32))
            tt = torch.tensor([int(t)], dtype=torch.long)
            x0_logits, z_logits = model(xt, tt, ct)
        return x0_logits[0].numpy(), z_logits[0].numpy()

    return denoise
