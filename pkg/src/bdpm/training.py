"""Training loop: XOR forward-noising, weighted BCE, AdamW, EMA, checkpoints.

Every stochastic choice in a training step (timesteps, noise masks) comes
from a stream keyed by (seed, purpose, step index), so a run is a pure
function of its config and resumed runs replay the unbroken trajectory.

Checkpoint container layout (little-endian throughout)::

    magic "BDPM-CK1" | u32 version | u32 header_len | header JSON
    | u32 tensor_count
    | per tensor: u16 name_len | name utf-8 | u8 dtype | u8 ndim
                  | ndim x u32 dims | u64 payload offset
    | payload

dtype codes: 0 = float32, 1 = float64, 2 = uint8, 3 = int64.  Tensors are
written contiguously in sorted-name order, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import time
from dataclasses import dataclass

import numpy as np
import torch

from bdpm.model import (
    Denoiser,
    ModelConfig,
    export_parameters,
    init_parameters,
    load_parameters,
)
from bdpm.noise import NoiseSchedule
from bdpm.rng import NOISE, TIMESTEPS, stream

MAGIC_CHECKPOINT = b"BDPM-CK1"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {"float32": 0, "float64": 1, "uint8": 2, "int64": 3}
_CODE_DTYPES = {v: np.dtype(k) for k, v in _DTYPE_CODES.items()}


class TrainStepError(RuntimeError):
    """A training step produced a non-finite loss or gradient."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated, or incompatible."""


def plane_weights(depth: int, channels: int = 1) -> np.ndarray:
    """Linear per-plane loss weights, MSB 1.0 down to LSB 0.1, per channel."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if depth == 1:
        per_channel = np.array([1.0])
    else:
        # 1 - 0.9 k/(n-1); linspace pins both endpoints to exactly 1.0 and 0.1
        per_channel = np.linspace(1.0, 0.1, depth)
    return np.tile(per_channel, channels)


@dataclass(frozen=True)
class LossWeights:
    """Per-plane weights for the clean-bit term and the noise term."""

    x_weights: np.ndarray
    z_weights: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_weights, dtype=np.float64)
        z = np.asarray(self.z_weights, dtype=np.float64)
        if x.shape != z.shape or x.ndim != 1:
            raise ValueError("x_weights and z_weights must be 1-D with equal length")
        if np.any(x < 0.1 - 1e-12) or np.any(x > 1.0 + 1e-12):
            raise ValueError("clean-bit plane weights must lie in [0.1, 1.0]")
        if not np.allclose(z, 1.0):
            raise ValueError("noise plane weights are constant 1.0")
        object.__setattr__(self, "x_weights", x)
        object.__setattr__(self, "z_weights", z)

    @classmethod
    def linear(cls, channels: int, depth: int = 8) -> "LossWeights":
        w = plane_weights(depth, channels)
        return cls(x_weights=w, z_weights=np.ones_like(w))


def bce_loss(x0_logits, z_logits, x0_target, z_target, weights: LossWeights):
    """Weighted binary cross-entropy over both logit stacks.

    Per-pixel BCE is computed stably from logits, averaged over batch and
    pixels within each plane, then weight-averaged over planes with the
    weights normalized to sum to the plane count, so unit weights reproduce
    plain mean BCE.  Returns (loss tensor, loss_x float, loss_z float).
    """
    if x0_logits.shape != x0_target.shape or z_logits.shape != z_target.shape:
        raise ValueError("logit and target shapes must match")
    if x0_logits.shape != z_logits.shape:
        raise ValueError("clean and noise stacks must have the same shape")
    n_planes = x0_logits.shape[1]
    if weights.x_weights.shape[0] != n_planes:
        raise ValueError(
            f"{weights.x_weights.shape[0]} plane weights for {n_planes} planes"
        )
    for name, logits in (("x0", x0_logits), ("z", z_logits)):
        if not torch.isfinite(logits).all():
            bad = int((~torch.isfinite(logits)).sum())
            raise ValueError(f"{bad} non-finite values in {name} logits")
    for name, target in (("x0", x0_target), ("z", z_target)):
        if not torch.logical_or(target == 0, target == 1).all():
            raise ValueError(f"{name} target is not binary")

    bce = torch.nn.functional.binary_cross_entropy_with_logits
    per_plane_x = bce(x0_logits, x0_target, reduction="none").mean(dim=(0, 2, 3))
    per_plane_z = bce(z_logits, z_target, reduction="none").mean(dim=(0, 2, 3))
    wx = torch.from_numpy(weights.x_weights).to(per_plane_x.dtype)
    wz = torch.from_numpy(weights.z_weights).to(per_plane_z.dtype)
    loss_x = (per_plane_x * wx).sum() / wx.sum()
    loss_z = (per_plane_z * wz).sum() / wz.sum()
    loss = loss_x + loss_z
    return loss, float(loss_x.detach()), float(loss_z.detach())


@dataclass
class TrainConfig:
    """Hyperparameters for a training run."""

    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    steps: int = 20_000
    batch_size: int = 16
    ema_decay: float = 0.995
    ema_every: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    diffusion_steps: int = 1000
    beta_start: float = 1e-5
    beta_end: float = 0.5
    seed: int = 0
    crop_augment: bool = False
    flip_augment: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive, weight decay >= 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.ema_every < 1 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("ema_every and batch_size must be >= 1, steps >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    """Mutable training state: single writer, checkpointable."""

    model: Denoiser
    optimizer: torch.optim.AdamW
    ema: dict[str, torch.Tensor]
    config: TrainConfig
    model_config: ModelConfig
    schedule: NoiseSchedule
    loss_weights: LossWeights
    step: int = 0


def init_train_state(model_config: ModelConfig, config: TrainConfig) -> TrainState:
    torch.use_deterministic_algorithms(True)
    if model_config.data_planes % 8:
        raise ValueError("data_planes must be a multiple of the bit depth 8")
    model = Denoiser(model_config)
    init_parameters(model, config.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )
    ema = {name: p.detach().clone() for name, p in model.named_parameters()}
    schedule = NoiseSchedule(config.diffusion_steps, config.beta_start, config.beta_end)
    weights = LossWeights.linear(channels=model_config.data_planes // 8, depth=8)
    return TrainState(model, optimizer, ema, config, model_config, schedule, weights)


def draw_timesteps(seed: int, step: int, batch_size: int, total_steps: int) -> np.ndarray:
    """Per-example uniform timesteps in [0, total_steps] for one step."""
    rng = stream(seed, TIMESTEPS, step)
    return rng.integers(0, total_steps + 1, size=batch_size)


def ema_update(ema: dict[str, torch.Tensor], model: Denoiser, decay: float) -> None:
    """In place: ema <- decay * ema + (1 - decay) * params."""
    with torch.no_grad():
        for name, param in model.named_parameters():
            ema[name].mul_(decay).add_(param.detach(), alpha=1.0 - decay)


def ema_model(state: TrainState) -> Denoiser:
    """A fresh model carrying the EMA weights, for evaluation and sampling."""
    model = Denoiser(state.model_config)
    load_parameters(model, {k: v.numpy() for k, v in state.ema.items()})
    model.eval()
    return model


def train_step(state: TrainState, batch: dict) -> dict:
    """One optimizer update; raises TrainStepError leaving state unchanged.

    ``batch`` holds "x0" (B, planes, H, W) uint8 clean bits and "cond"
    (B, cond_planes, H, W) uint8 conditioning bits (or None).
    """
    x0 = batch["x0"]
    cond = batch.get("cond")
    if x0.dtype != np.uint8:
        raise ValueError("x0 bits must be uint8")
    batch_size = x0.shape[0]
    cfg = state.config
    total = state.schedule.total_steps

    t = draw_timesteps(cfg.seed, state.step, batch_size, total)
    rng_noise = stream(cfg.seed, NOISE, state.step)
    flip_p = state.schedule.betas[t][:, None, None, None]
    z = (rng_noise.random(x0.shape) < flip_p).astype(np.uint8)
    x_t = np.bitwise_xor(x0, z)

    xt_f = torch.from_numpy(x_t.astype(np.float32))
    x0_f = torch.from_numpy(x0.astype(np.float32))
    z_f = torch.from_numpy(z.astype(np.float32))
    cond_f = None
    if cond is not None:
        cond_f = torch.from_numpy(cond.astype(np.float32))
    t_f = torch.from_numpy(t.astype(np.int64))

    x0_logits, z_logits = state.model(xt_f, t_f, cond_f)
    loss, loss_x, loss_z = bce_loss(x0_logits, z_logits, x0_f, z_f, state.loss_weights)
    if not torch.isfinite(loss):
        state.optimizer.zero_grad(set_to_none=True)
        raise TrainStepError(f"non-finite loss at step {state.step}: {float(loss)}")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for name, param in state.model.named_parameters():
        if param.grad is not None and not torch.isfinite(param.grad).all():
            state.optimizer.zero_grad(set_to_none=True)
            raise TrainStepError(f"non-finite gradient in {name} at step {state.step}")
    state.optimizer.step()
    state.step += 1
    if state.step % cfg.ema_every == 0:
        ema_update(state.ema, state.model, cfg.ema_decay)
    return {"step": state.step, "loss": float(loss.detach()), "loss_x": loss_x, "loss_z": loss_z}


def fit(state: TrainState, batch_fn, n_steps: int, log=None, checkpoint_path=None,
        checkpoint_every: int = 0) -> list[dict]:
    """Run n_steps of train_step with batches from batch_fn(step_index)."""
    history = []
    for _ in range(n_steps):
        batch = batch_fn(state.step)
        metrics = train_step(state, batch)
        history.append(metrics)
        if log is not None:
            log.append(metrics, lr=state.config.learning_rate)
        if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path)
    return history


class MetricsLog:
    """Append-only CSV stream: step, loss, loss_x, loss_z, lr, wallclock."""

    FIELDS = ("step", "loss", "loss_x", "loss_z", "lr", "wallclock")

    def __init__(self, path):
        self.path = path
        new_file = not os.path.exists(path)
        self._fh = open(path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if new_file:
            self._writer.writerow(self.FIELDS)
            self._fh.flush()

    def append(self, metrics: dict, lr: float) -> None:
        self._writer.writerow(
            [metrics["step"], metrics["loss"], metrics["loss_x"], metrics["loss_z"],
             lr, time.time()]
        )
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    table = bytearray()
    payload = bytearray()
    table += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.name not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported tensor dtype {arr.dtype} for {name}")
        ename = name.encode("utf-8")
        table += struct.pack("<H", len(ename)) + ename
        table += struct.pack("<BB", _DTYPE_CODES[arr.dtype.name], arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", len(payload))
        payload += arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC_CHECKPOINT)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(table)
        fh.write(payload)
    os.replace(tmp, path)


def _read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()

    def take(n: int, pos: int) -> tuple[bytes, int]:
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint file: {path}")
        return data[pos : pos + n], pos + n

    raw, pos = take(len(MAGIC_CHECKPOINT), 0)
    if raw != MAGIC_CHECKPOINT:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    raw, pos = take(4, pos)
    version = struct.unpack("<I", raw)[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    raw, pos = take(4, pos)
    header_len = struct.unpack("<I", raw)[0]
    raw, pos = take(header_len, pos)
    header = json.loads(raw.decode("utf-8"))
    raw, pos = take(4, pos)
    count = struct.unpack("<I", raw)[0]
    entries = []
    for _ in range(count):
        raw, pos = take(2, pos)
        name_len = struct.unpack("<H", raw)[0]
        raw, pos = take(name_len, pos)
        name = raw.decode("utf-8")
        raw, pos = take(2, pos)
        code, ndim = struct.unpack("<BB", raw)
        raw, pos = take(4 * ndim, pos)
        shape = struct.unpack(f"<{ndim}I", raw)
        raw, pos = take(8, pos)
        offset = struct.unpack("<Q", raw)[0]
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name}")
        entries.append((name, _CODE_DTYPES[code], shape, offset))
    payload = data[pos:]
    tensors = {}
    for name, dtype, shape, offset in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError(f"truncated payload for tensor {name} in {path}")
        buf = payload[offset : offset + nbytes]
        tensors[name] = np.frombuffer(buf, dtype=dtype.newbyteorder("<")).reshape(shape).astype(dtype)
    return header, tensors


def save_checkpoint(state: TrainState, path) -> None:
    """Atomically write the full training state."""
    tensors: dict[str, np.ndarray] = {}
    for name, arr in export_parameters(state.model).items():
        tensors[f"model.{name}"] = arr
    for name, tensor in state.ema.items():
        tensors[f"ema.{name}"] = tensor.numpy().astype(np.float32, copy=True)
    for name, param in state.model.named_parameters():
        opt_state = state.optimizer.state.get(param)
        if not opt_state:
            continue
        tensors[f"opt.{name}.step"] = np.asarray(opt_state["step"], dtype=np.float32)
        tensors[f"opt.{name}.exp_avg"] = opt_state["exp_avg"].numpy().astype(np.float32)
        tensors[f"opt.{name}.exp_avg_sq"] = opt_state["exp_avg_sq"].numpy().astype(np.float32)
    header = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "model": state.model_config.to_dict(),
        "train": state.config.to_dict(),
    }
    _write_container(path, header, tensors)


def load_checkpoint(path) -> TrainState:
    """Rebuild a TrainState; malformed files raise CheckpointError."""
    header, tensors = _read_container(path)
    try:
        model_config = ModelConfig.from_dict(header["model"])
        train_config = TrainConfig.from_dict(header["train"])
        step = int(header["step"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"invalid checkpoint header in {path}: {exc}") from exc

    state = init_train_state(model_config, train_config)
    model_tensors = {
        name[len("model."):]: arr for name, arr in tensors.items() if name.startswith("model.")
    }
    load_parameters(state.model, model_tensors)
    for name in state.ema:
        key = f"ema.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing EMA tensor {key}")
        state.ema[name] = torch.from_numpy(tensors[key].copy())
    for name, param in state.model.named_parameters():
        key = f"opt.{name}.exp_avg"
        if key not in tensors:
            continue
        state.optimizer.state[param] = {
            "step": torch.tensor(float(tensors[f"opt.{name}.step"].reshape(-1)[0])),
            "exp_avg": torch.from_numpy(tensors[key].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"opt.{name}.exp_avg_sq"].copy()),
        }
    state.step = step
    return state


def resume_or_init(model_config: ModelConfig, config: TrainConfig, path) -> TrainState:
    """Load the checkpoint at path when present, else start fresh."""
    if path and os.path.exists(path):
        return load_checkpoint(path)
    return init_train_state(model_config, config)
