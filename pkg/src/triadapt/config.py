"""Run configuration: nested dataclasses with a TOML round trip.

Defaults carry the published training hyperparameters (Adam learning rates
1e-4 / 1.25e-3 / 7.5e-4 for pose net / generator / discriminator, batch 32,
horizontal flips). Loss weights are per-target-domain settings; the defaults
here are the ones used on the synthetic benchmark.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .camera import CameraConfig, PosePrior
from .generator import GeneratorConfig
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    resolution: int = 32
    plane_channels: int = 16
    block_channels: tuple[int, ...] = (64, 32, 32)
    base_res: int = 8
    z_dim: int = 64
    zd_dim: int = 16
    w_dim: int = 64
    decoder_hidden: int = 64
    n_samples: int = 24
    disc_channels: tuple[int, ...] = (32, 64, 64, 64)
    pose_channels: tuple[int, ...] = (16, 32, 64, 64)


@dataclass
class CameraSection:
    radius: float = 2.7
    fov_deg: float = 30.0
    near: float | None = None
    far: float | None = None
    yaw_range: tuple[float, float] = (-0.5, 0.5)
    pitch_range: tuple[float, float] = (-0.3, 0.3)


@dataclass
class LossSection:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 1.0
    r1_weight: float = 1.0
    r1_interval: int = 16


@dataclass
class OptimSection:
    lr_p: float = 0.0001
    lr_g: float = 0.00125
    lr_d: float = 0.00075
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8


@dataclass
class TrainSection:
    batch_size: int = 32
    flip_p: float = 0.5
    freeze_depth: int = 2
    adapt_iters: int = 2000
    p_steps_per_iter: int = 1
    g_steps_per_iter: int = 1
    pretrain_iters: int = 3000
    pretrain_p_iters: int = 3000
    pretrain_lr_g: float = 0.0025
    pretrain_lr_d: float = 0.0025
    pretrain_lr_p: float = 0.001
    checkpoint_every: int = 250
    log_every: int = 1


@dataclass
class DataSection:
    source_n: int = 2000
    target_n: int = 2000
    heldout_n: int = 256
    source_seed: int = 1
    target_seed: int = 2
    heldout_seed: int = 3


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    camera: CameraSection = field(default_factory=CameraSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        res = self.model.resolution
        if res < 16 or res & (res - 1):
            raise ConfigError(f"model.resolution must be a power of two >= 16, got {res}")
        if self.model.n_samples < 2:
            raise ConfigError("model.n_samples must be >= 2")
        for name in ("lr_p", "lr_g", "lr_d"):
            if getattr(self.optim, name) <= 0:
                raise ConfigError(f"optim.{name} must be > 0")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        for name in ("alpha", "beta", "gamma", "r1_weight"):
            if getattr(self.loss, name) < 0:
                raise ConfigError(f"loss.{name} must be >= 0")
        if self.loss.r1_interval < 1:
            raise ConfigError("loss.r1_interval must be >= 1")
        plane_res = self.model.base_res * 2 ** (len(self.model.block_channels) - 1)
        if plane_res < 2:
            raise ConfigError("tri-plane resolution must be >= 2")
        if not 0 <= self.train.freeze_depth <= len(self.model.disc_channels):
            raise ConfigError("train.freeze_depth exceeds the number of discriminator blocks")
        if res % 2 ** len(self.model.disc_channels) or res % 2 ** len(self.model.pose_channels):
            raise ConfigError("resolution must be divisible by 2**(number of downsampling blocks)")
        try:
            self.camera_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # derived objects -------------------------------------------------
    def prior(self) -> PosePrior:
        return PosePrior(tuple(self.camera.yaw_range), tuple(self.camera.pitch_range))

    def camera_config(self) -> CameraConfig:
        cam = self.camera
        return CameraConfig(radius=cam.radius, fov=math.radians(cam.fov_deg), near=cam.near,
                            far=cam.far, prior=self.prior())

    def generator_config(self) -> GeneratorConfig:
        m = self.model
        return GeneratorConfig(z_dim=m.z_dim, zd_dim=m.zd_dim, w_dim=m.w_dim,
                               block_channels=tuple(m.block_channels), base_res=m.base_res,
                               plane_channels=m.plane_channels, decoder_hidden=m.decoder_hidden)

    def loss_weights(self) -> LossWeights:
        lo = self.loss
        return LossWeights(lo.alpha, lo.beta, lo.gamma, lo.r1_weight)

    # serialization ----------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return _strip_none(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        data = dict(data)
        kwargs: dict[str, Any] = {}
        sections = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            if key == "seed":
                kwargs[key] = int(value)
                continue
            section_type = _SECTION_TYPES[key]
            kwargs[key] = _build_section(section_type, key, value)
        return cls(**kwargs)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(tomli.loads(text))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Apply dotted-key overrides, e.g. ``{"loss.alpha": 0.0, "seed": 3}``."""
        data = dataclasses.asdict(self)
        for dotted, value in overrides.items():
            node = data
            parts = dotted.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config key {dotted!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(_strip_none(data))


_SECTION_TYPES = {
    "model": ModelSection, "camera": CameraSection, "loss": LossSection,
    "optim": OptimSection, "train": TrainSection, "data": DataSection,
}


def _build_section(section_type, name, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section [{name}] must be a table")
    known = {f.name: f for f in dataclasses.fields(section_type)}
    kwargs = {}
    defaults = section_type()
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
        default = getattr(defaults, key)
        if isinstance(default, tuple) or isinstance(value, list):
            value = tuple(value)
        elif isinstance(default, float) and isinstance(value, int):
            value = float(value)
        kwargs[key] = value
    return section_type(**kwargs)


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_strip_none(v) for v in obj]
    return obj
