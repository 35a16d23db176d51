"""Run configuration: defaults encoding the training protocol, JSON parsing,
and key=value overrides with unknown-key rejection."""

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dataset import OTHER, PLANES, TRANS_CEREBELLUM, TRANS_THALAMIC, AugmentConfig
from .errors import ConfigError

PIPELINES = ("dsr", "tbgan")
EPOCH_UNITS = ("epochs", "steps")


@dataclass(frozen=True)
class DsrConfig:
    """Diffusion + histogram matching + x2 super-resolution pipeline knobs."""

    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_size: int = 128          # diffusion output resolution
    high_size: int = 256          # super-resolved resolution
    unet_preset: str = "default"
    sr_blocks: int = 8
    sr_width: int = 64
    adv_weight: float = 1e-3
    sr_epochs: int = 200
    sr_unit: str = "epochs"
    histmatch: bool = True
    reference_count: int = 0      # images pooled into the reference CDF; 0 = all

    def __post_init__(self):
        if self.timesteps < 1:
            raise ConfigError(f"timesteps must be >= 1, got {self.timesteps}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({self.beta_start}, {self.beta_end})")
        if self.high_size != 2 * self.base_size:
            raise ConfigError(f"high_size must be 2x base_size, got {self.base_size} -> {self.high_size}")
        if self.sr_unit not in EPOCH_UNITS:
            raise ConfigError(f"sr_unit must be one of {EPOCH_UNITS}, got {self.sr_unit!r}")
        if self.sr_epochs < 0:
            raise ConfigError(f"sr_epochs must be >= 0, got {self.sr_epochs}")


@dataclass(frozen=True)
class TbganConfig:
    """Swin-attention GAN knobs: architecture, DiffAug, APA, transfer stage."""

    resolution: int = 256
    preset: str = "default"
    latent_dim: int = 128
    window: int = 8
    pretrain_epochs: int = 500
    pretrain_unit: str = "epochs"
    pretrain_plane: str = TRANS_THALAMIC
    pretrain_root: str = ""
    diffaug_transforms: tuple = ("color", "translation", "cutout")
    translation_ratio: float = 0.125
    cutout_ratio: float = 0.5
    apa_target: float = 0.6
    apa_speed_images: int = 500_000
    apa_ema_decay: float = 0.99
    r1_gamma: float = 10.0
    r1_interval: int = 16

    def __post_init__(self):
        if self.pretrain_unit not in EPOCH_UNITS:
            raise ConfigError(f"pretrain_unit must be one of {EPOCH_UNITS}, got {self.pretrain_unit!r}")
        if self.pretrain_epochs < 0:
            raise ConfigError(f"pretrain_epochs must be >= 0, got {self.pretrain_epochs}")
        if self.pretrain_plane not in PLANES:
            raise ConfigError(f"unknown pretrain_plane {self.pretrain_plane!r}")
        for name in ("translation_ratio", "cutout_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")


@dataclass(frozen=True)
class TrainConfig:
    pipeline: str
    plane: str
    data_root: str
    epochs: int
    epoch_unit: str = "epochs"
    batch_size: int = 16
    channels: int = 1
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    seed: int = 0
    eval_every: int = 10
    checkpoint_every: int = 100
    eval_fake_count: int = 408    # synthetic images per FID evaluation
    eval_real_count: int = 0      # real images per FID evaluation; 0 = all
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dsr: DsrConfig = None
    tbgan: TbganConfig = None

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.plane not in PLANES:
            raise ConfigError(f"unknown plane {self.plane!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.epoch_unit not in EPOCH_UNITS:
            raise ConfigError(f"epoch_unit must be one of {EPOCH_UNITS}, got {self.epoch_unit!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("eval_every and checkpoint_every must be >= 1")
        if self.eval_fake_count < 2:
            raise ConfigError(f"eval_fake_count must be >= 2, got {self.eval_fake_count}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.pipeline == "dsr" and self.dsr is None:
            object.__setattr__(self, "dsr", DsrConfig())
        if self.pipeline == "tbgan" and self.tbgan is None:
            object.__setattr__(self, "tbgan", TbganConfig())


def default_dsr_config(data_root: str = "", plane: str = TRANS_CEREBELLUM, seed: int = 0) -> TrainConfig:
    """The DSR-GAN protocol: 10000-epoch diffusion finetune, 200-epoch SRGAN,
    128 -> 256 with histogram matching in between."""
    return TrainConfig(
        pipeline="dsr", plane=plane, data_root=data_root,
        epochs=10000, batch_size=16,
        lr_generator=1e-4, lr_discriminator=1e-4, adam_betas=(0.9, 0.999),
        seed=seed, dsr=DsrConfig(),
    )


def default_tbgan_config(data_root: str = "", plane: str = TRANS_CEREBELLUM, seed: int = 0,
                         pretrain_root: str = "") -> TrainConfig:
    """The TB-GAN protocol: 500-epoch pretrain on the trans-thalamic plane,
    200-epoch finetune, two time-scale Adam (d 1e-4, g 1e-5)."""
    return TrainConfig(
        pipeline="tbgan", plane=plane, data_root=data_root,
        epochs=200, batch_size=16,
        lr_generator=1e-5, lr_discriminator=1e-4, adam_betas=(0.0, 0.99),
        seed=seed, augment=AugmentConfig.identity(),
        tbgan=TbganConfig(pretrain_root=pretrain_root),
    )


_NESTED = {"augment": AugmentConfig, "dsr": DsrConfig, "tbgan": TbganConfig}
_TUPLE_FIELDS = {"adam_betas", "zoom_range", "rotation_range_deg", "diffaug_transforms"}


def _build(cls, data: dict, where: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} in {where or cls.__name__}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data or data[f.name] is None:
            continue
        value = data[f.name]
        if f.name in _NESTED:
            value = _build(_NESTED[f.name], value, where=f.name)
        elif f.name in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, where="config")


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply `a.b.c=value` overrides on top of a raw config dict."""
    out = json.loads(json.dumps(data))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into non-object key {part!r}")
        node[parts[-1]] = value
    return out
