"""Run configuration: a flat key=value file plus command-line overrides.

One line per assignment, ``#`` comments and blank lines ignored.  Nested
training and sampler options use dotted keys (``train.steps=5000``,
``sampler.threshold=0.5``).  Unless set explicitly, ``train.seed`` and
``sampler.seed`` follow the top-level ``seed`` so a run is reproducible
from the resolved file alone.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from bdpm.model import ModelConfig
from bdpm.sampling import SamplerConfig
from bdpm.training import TrainConfig

TASKS = ("sr", "inpaint")

_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


@dataclass
class RunConfig:
    """Everything a run needs: task, data, model size, training, sampling."""

    task: str = "inpaint"
    out_dir: str = "runs/default"
    seed: int = 0
    dataset_dir: str = ""
    dataset_kind: str = "mixed"
    image_size: int = 32
    channels: int = 3
    train_count: int = 512
    eval_count: int = 100
    width: int = 32
    time_dim: int = 128
    sr_factor: int = 4
    mask_lo: float = 0.10
    mask_hi: float = 0.30
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.image_size < 8 or self.image_size % 4:
            raise ValueError(f"image_size must be >= 8 and divisible by 4, got {self.image_size}")
        if self.task == "sr" and self.image_size % self.sr_factor:
            raise ValueError(
                f"image_size {self.image_size} not divisible by sr_factor {self.sr_factor}"
            )
        if self.train_count < 1 or self.eval_count < 1:
            raise ValueError("train_count and eval_count must be >= 1")
        if not 0.0 < self.mask_lo <= self.mask_hi < 1.0:
            raise ValueError(f"mask band ({self.mask_lo}, {self.mask_hi}) is not valid")

    def model_config(self) -> ModelConfig:
        planes = self.channels * 8
        extra = 1 if self.task == "inpaint" else 0
        return ModelConfig(
            data_planes=planes,
            cond_planes=planes + extra,
            width=self.width,
            time_dim=self.time_dim,
        )


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _coerce(key: str, text: str, kind: type):
    try:
        if kind is bool:
            word = text.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"expected a boolean, got {text!r}")
            return _BOOL_WORDS[word]
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ValueError(f"bad value for {key}: {exc}") from None


def parse_assignments(lines) -> dict[str, str]:
    """key=value pairs from config lines; comments and blanks skipped."""
    items: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def config_from_items(items: dict[str, str]) -> RunConfig:
    """Build a RunConfig from flat string items, validating every key."""
    top_types = _field_types(RunConfig)
    sections = {"train": (TrainConfig, _field_types(TrainConfig)),
                "sampler": (SamplerConfig, _field_types(SamplerConfig))}
    top_kwargs: dict = {}
    section_kwargs: dict[str, dict] = {name: {} for name in sections}
    for key, text in items.items():
        if "." in key:
            section, _, name = key.partition(".")
            if section not in sections or name not in sections[section][1]:
                raise ValueError(f"unknown config key {key!r}")
            section_kwargs[section][name] = _coerce(key, text, sections[section][1][name])
        else:
            if key not in top_types or key in sections:
                raise ValueError(f"unknown config key {key!r}")
            top_kwargs[key] = _coerce(key, text, top_types[key])
    seed = top_kwargs.get("seed", 0)
    section_kwargs["train"].setdefault("seed", seed)
    section_kwargs["sampler"].setdefault("seed", seed)
    return RunConfig(
        train=TrainConfig(**section_kwargs["train"]),
        sampler=SamplerConfig(**section_kwargs["sampler"]),
        **top_kwargs,
    )


def load_run_config(path, overrides=()) -> RunConfig:
    """Parse a config file, then apply ``key=value`` override strings."""
    with open(path) as fh:
        items = parse_assignments(fh)
    items.update(parse_assignments(overrides))
    return config_from_items(items)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten(config: RunConfig) -> dict[str, str]:
    """The flat key=value view of a config, in stable field order."""
    items: dict[str, str] = {}
    for f in dataclasses.fields(RunConfig):
        if f.name in ("train", "sampler"):
            continue
        items[f.name] = _format(getattr(config, f.name))
    for section, sub in (("train", config.train), ("sampler", config.sampler)):
        for f in dataclasses.fields(sub):
            items[f"{section}.{f.name}"] = _format(getattr(sub, f.name))
    return items


def save_run_config(config: RunConfig, path) -> None:
    with open(path, "w") as fh:
        for key, value in flatten(config).items():
            fh.write(f"{key}={value}\n")
