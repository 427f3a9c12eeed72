"""Configuration dataclasses, JSON round-trip, and validation.

A run is described by five sections (data, degrade, model, diffusion,
train).  ``RunConfig.from_dict`` rejects unknown keys and out-of-range
values with ``ConfigError`` so the CLI can map them to exit code 2.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError


@dataclass
class DataConfig:
    num_classes: int = 7
    image_size: int = 32
    train_size: int = 2000
    test_size: int = 500
    jitter: float = 0.15


@dataclass
class DegradeConfig:
    gamma: float = 0.6
    blur_sigma: float = 1.0
    noise_sigma: float = 0.05


@dataclass
class ModelConfig:
    d_label: int = 64
    d_image: int = 64
    epr_dim: int = 64
    channels: tuple = (32, 64, 128)
    blocks_per_level: int = 2
    window: int = 4
    dil_heads: int = 4
    dmnet_heads: int = 1
    fusion_dim: int = 128
    fusion_heads: int = 4
    fpen_hidden: int = 128
    fpen_layers: int = 4
    time_dim: int = 16
    denoiser_hidden: int = 256


@dataclass
class DiffusionConfig:
    timesteps: int = 4
    beta_start: float = 0.3
    beta_end: float = 0.999
    ddpm_coeff: bool = False
    insert_noise: bool = True


@dataclass
class TrainConfig:
    lr: float = 3.5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 5.0
    batch_size: int = 64
    epochs: int = 30
    use_diffusion: bool = True
    use_kl: bool = True
    freeze_encoders: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    _SECTIONS = {
        "data": DataConfig,
        "degrade": DegradeConfig,
        "model": ModelConfig,
        "diffusion": DiffusionConfig,
        "train": TrainConfig,
    }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(d) - set(cls._SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for section, klass in cls._SECTIONS.items():
            sub = d.get(section, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"config section '{section}' must be an object")
            names = {f.name for f in dataclasses.fields(klass)}
            bad = set(sub) - names
            if bad:
                raise ConfigError(f"unknown keys in '{section}': {sorted(bad)}")
            try:
                if "channels" in sub:
                    sub = dict(sub, channels=tuple(sub["channels"]))
                kwargs[section] = klass(**sub)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value in section '{section}': {e}") from e
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["channels"] = list(d["model"]["channels"])
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def validate(self) -> None:
        da, dg, m, di, tr = self.data, self.degrade, self.model, self.diffusion, self.train
        if da.num_classes < 2:
            raise ConfigError("data.num_classes must be >= 2")
        if da.image_size < 16 or da.image_size % 16:
            raise ConfigError("data.image_size must be a positive multiple of 16")
        if da.train_size < 1 or da.test_size < 1:
            raise ConfigError("data sizes must be positive")
        if da.jitter < 0:
            raise ConfigError("data.jitter must be >= 0")
        if dg.gamma <= 0 or dg.gamma > 1.5:
            raise ConfigError("degrade.gamma must be in (0, 1.5]")
        if dg.blur_sigma < 0 or dg.noise_sigma < 0:
            raise ConfigError("degrade sigmas must be >= 0")
        if len(m.channels) != 3:
            raise ConfigError("model.channels must list 3 levels")
        if any(c < 1 for c in m.channels):
            raise ConfigError("model.channels must be positive")
        if m.blocks_per_level < 1:
            raise ConfigError("model.blocks_per_level must be >= 1")
        for lvl, c in enumerate(m.channels, start=1):
            if c % m.dil_heads:
                raise ConfigError(
                    f"model.channels[{lvl - 1}]={c} not divisible by dil_heads={m.dil_heads}")
            if c % m.dmnet_heads:
                raise ConfigError(
                    f"model.channels[{lvl - 1}]={c} not divisible by dmnet_heads={m.dmnet_heads}")
        if m.fusion_dim % m.fusion_heads:
            raise ConfigError("model.fusion_dim must be divisible by fusion_heads")
        if m.time_dim % 2:
            raise ConfigError("model.time_dim must be even")
        if m.fpen_layers < 2:
            raise ConfigError("model.fpen_layers must be >= 2")
        if di.timesteps < 1:
            raise ConfigError("diffusion.timesteps must be >= 1")
        if not (0.0 < di.beta_start < 1.0 and 0.0 < di.beta_end < 1.0):
            raise ConfigError("diffusion betas must lie in (0, 1)")
        if di.beta_start > di.beta_end:
            raise ConfigError("diffusion.beta_start must not exceed beta_end")
        if tr.lr <= 0 and tr.lr != 0.0:
            raise ConfigError("train.lr must be >= 0")
        if tr.batch_size < 1 or tr.epochs < 0:
            raise ConfigError("train.batch_size must be >= 1 and epochs >= 0")
        if tr.grad_clip < 0:
            raise ConfigError("train.grad_clip must be >= 0 (0 disables clipping)")
