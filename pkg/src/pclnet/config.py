"""Architecture, loss and training hyperparameters."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

PCLNET = "PCLNet"
PCLNETC = "PCLNetC"
VARIANTS = (PCLNET, PCLNETC)

SUPERVISED = "supervised-epe"
UNSUPERVISED = "unsupervised-reconstruction"
MODES = (SUPERVISED, UNSUPERVISED)


@dataclass
class ModelConfig:
    backbone_channels: tuple = (16, 32, 64, 96)
    motion_channels: int = 16
    lstm_kernel: int = 3
    spp_bins: tuple = (1, 2, 4)
    ofe_widths: tuple = (96, 64, 32)
    context_widths: tuple = (32, 32, 32, 24, 16, 8, 2)
    context_dilations: tuple = (1, 2, 4, 8, 16, 1, 1)
    variant: str = PCLNET
    input_mean: float = 0.5
    input_std: float = 0.5
    forget_bias: float = 1.0
    flow_init_gain: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        chans = tuple(self.backbone_channels)
        if len(chans) != 4 or any(b <= a for a, b in zip(chans, chans[1:])):
            raise ValueError(f"backbone channels must be 4 strictly increasing widths, got {chans}")
        if len(self.context_widths) != 7 or len(self.context_dilations) != 7:
            raise ValueError("context block needs exactly 7 layers")
        if self.context_widths[-1] != 2:
            raise ValueError("context block must end in 2 channels")

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        base = dict(
            backbone_channels=(64, 128, 256, 512),
            motion_channels=32,
            ofe_widths=(128, 96, 64),
            context_widths=(128, 128, 128, 96, 64, 32, 2),
        )
        base.update(kw)
        return cls(**base)


@dataclass
class LossConfig:
    alpha: float = 0.4
    epsilon: float = 1e-6
    ssim_window: int = 7
    beta1: float = 1.0
    beta2: float = 0.2
    beta3: float = 0.5
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    # strides 32, 16, 8, 4, 2 and the full-resolution field
    scale_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.beta3) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if len(self.scale_weights) != 6:
            raise ValueError("scale_weights needs one weight per flow scale (6)")


@dataclass
class TrainConfig:
    mode: str = UNSUPERVISED
    batch_size: int = 4
    lr: float = 1e-3
    schedule: str = "plateau"  # or "step"
    milestones: tuple = (60_000, 80_000, 100_000, 120_000)
    decay_factor: float = 0.1
    plateau_patience: int = 3
    plateau_window: int = 100
    plateau_threshold: float = 1e-4
    optimizer: str = "adam"  # or "momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0
    max_iterations: int = 1000
    seed: int = 0
    precision: str = "f32"
    checkpoint_interval: int = 500
    validate_interval: int = 100
    clip_length: int = 6
    frame_size: tuple = (64, 64)
    augment: tuple = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if not 0 < self.decay_factor < 1:
            raise ValueError(f"decay factor must lie in (0, 1), got {self.decay_factor}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.clip_length < 2:
            raise ValueError("clip length must be at least 2")

    @classmethod
    def supervised_preset(cls, **kw) -> "TrainConfig":
        base = dict(mode=SUPERVISED, batch_size=32, lr=1e-4, schedule="step",
                    milestones=(60_000, 80_000, 100_000, 120_000), decay_factor=0.5,
                    clip_length=2)
        base.update(kw)
        return cls(**base)

    @classmethod
    def unsupervised_preset(cls, **kw) -> "TrainConfig":
        base = dict(mode=UNSUPERVISED, batch_size=48, lr=1e-3, schedule="plateau", decay_factor=0.1,
                    clip_length=6)
        base.update(kw)
        return cls(**base)

    @property
    def dtype(self):
        import numpy as np

        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        def build(klass, sub):
            sub = dict(sub or {})
            names = {f.name for f in dataclasses.fields(klass)}
            unknown = set(sub) - names
            if unknown:
                raise ValueError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
            for f in dataclasses.fields(klass):
                if f.name in sub and isinstance(sub[f.name], list):
                    sub[f.name] = tuple(sub[f.name])
            return klass(**sub)

        d = d or {}
        unknown = set(d) - {"model", "loss", "train"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(build(ModelConfig, d.get("model")), build(LossConfig, d.get("loss")), build(TrainConfig, d.get("train")))

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(json.loads(self.to_json()), sort_keys=False))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def model_hash(self) -> bytes:
        """Digest of the architecture record; checkpoints refuse mismatches."""
        blob = json.dumps(dataclasses.asdict(self.model), sort_keys=True)
        return hashlib.sha256(blob.encode()).digest()
