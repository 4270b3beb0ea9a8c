"""Configuration dataclasses and strict JSON loading.

Every config is a plain dataclass. ``from_dict`` rejects unknown keys at any
nesting level so that typos in run configs fail loudly instead of silently
falling back to defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

ADAPTER_BOTTLENECK_RATIO = 0.7


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 16
    image_layers: int = 4
    text_layers: int = 4
    image_width: int = 32
    text_width: int = 32
    shared_dim: int = 32
    image_heads: int = 2
    text_heads: int = 2
    context_length: int = 16
    vocab_size: int = 64
    mlp_ratio: int = 4
    init_seed: int = 0

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.image_width % self.image_heads:
            raise ConfigError(
                f"image_width {self.image_width} not divisible by image_heads {self.image_heads}"
            )
        if self.text_width % self.text_heads:
            raise ConfigError(
                f"text_width {self.text_width} not divisible by text_heads {self.text_heads}"
            )
        if self.context_length < 2:
            raise ConfigError("context_length must be >= 2 to hold [SOS] and [EOS]")
        if self.image_layers < 1 or self.text_layers < 1:
            raise ConfigError("encoders need at least one layer")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover the four special tokens")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_visual(self) -> int:
        return self.grid_size**2


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapters: bool = True
    cfe: bool = True
    ske: bool = True
    # None means "all layers" for adapters
    n_adapter_layers: Optional[int] = None
    n_cfe: int = 2
    n_ske: int = 2
    cfe_heads: int = 2
    ske_heads: int = 2
    image_adapter_dim: Optional[int] = None
    text_adapter_dim: Optional[int] = None
    adapter_scaler_init: float = 0.6
    cfe_scaler_init: float = 0.5
    ske_scaler_init: float = 0.5
    logit_scale_init: float = 10.0
    decoder_min_channels: int = 16

    def validate(self) -> None:
        bb = self.backbone
        bb.validate()
        if self.logit_scale_init <= 0:
            raise ConfigError("logit_scale_init must be > 0")
        if self.cfe and self.n_cfe < 1:
            raise ConfigError("cfe enabled but n_cfe < 1")
        if not self.cfe and self.n_cfe != 0:
            raise ConfigError("cfe disabled but n_cfe != 0")
        if self.ske and self.n_ske < 1:
            raise ConfigError("ske enabled but n_ske < 1")
        if not self.ske and self.n_ske != 0:
            raise ConfigError("ske disabled but n_ske != 0")
        if not self.adapters and self.n_adapter_layers not in (None, 0):
            raise ConfigError("adapters disabled but n_adapter_layers set")
        if self.adapters and self.n_adapter_layers is not None:
            if not 1 <= self.n_adapter_layers <= max(bb.image_layers, bb.text_layers):
                raise ConfigError("n_adapter_layers out of range")
        if self.n_cfe > min(bb.image_layers, bb.text_layers):
            raise ConfigError(
                f"n_cfe={self.n_cfe} exceeds min(text_layers, image_layers)="
                f"{min(bb.image_layers, bb.text_layers)}"
            )
        if self.cfe and bb.shared_dim % self.cfe_heads:
            raise ConfigError("shared_dim not divisible by cfe_heads")
        if self.ske and bb.shared_dim % self.ske_heads:
            raise ConfigError("shared_dim not divisible by ske_heads")

    def resolved_adapter_dims(self) -> tuple[int, int]:
        bb = self.backbone
        img = self.image_adapter_dim or max(1, round(ADAPTER_BOTTLENECK_RATIO * bb.image_width))
        txt = self.text_adapter_dim or max(1, round(ADAPTER_BOTTLENECK_RATIO * bb.text_width))
        return img, txt

    def with_toggles(self, adapters: bool, cfe: bool, ske: bool, n_cfe: int = 2, n_ske: int = 2) -> "ModelConfig":
        """Copy with block families switched on/off and counts made consistent."""
        return dataclasses.replace(
            self,
            adapters=adapters,
            n_adapter_layers=None,
            cfe=cfe,
            n_cfe=n_cfe if cfe else 0,
            ske=ske,
            n_ske=n_ske if ske else 0,
        )


@dataclass
class LossConfig:
    lambda_dice: float = 1.0
    lambda_focal: float = 1.75
    alpha_focal: float = 0.65
    gamma_focal: float = 2.0
    dice_epsilon: float = 1.0
    focal_reduction: str = "mean"

    def validate(self) -> None:
        for name in ("lambda_dice", "lambda_focal", "gamma_focal", "dice_epsilon"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 < self.alpha_focal < 1.0:
            raise ConfigError("alpha_focal must lie in (0, 1)")
        if self.focal_reduction not in ("mean", "sum"):
            raise ConfigError("focal_reduction must be 'mean' or 'sum'")


@dataclass
class AugmentConfig:
    enabled: bool = False
    rotation_deg: float = 10.0
    translate_frac: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    saturation_range: tuple[float, float] = (0.7, 1.3)
    brightness_range: tuple[float, float] = (0.9, 1.1)


@dataclass
class TrainConfig:
    lr_init: float = 5e-5
    # stage 2 falls back to lr_init when unset
    lr_init_stage2: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-3
    lr_power: float = 0.9
    batch_size: int = 8
    stage1_epochs: int = 60
    stage2_epochs: int = 1
    # hard cap on optimizer steps per stage; None means epochs decide
    stage1_max_steps: Optional[int] = None
    stage2_max_steps: Optional[int] = None
    grad_clip: Optional[float] = None
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if self.lr_init < 0 or (self.lr_init_stage2 is not None and self.lr_init_stage2 < 0):
            raise ConfigError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_samples: int = 16
    image_size: int = 64
    shapes: tuple[str, ...] = ("circle", "square", "triangle")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    relations: tuple[str, ...] = ("left of", "right of", "above", "below", "largest", "smallest")
    distractors: tuple[int, int] = (1, 2)
    relational_fraction: float = 0.5
    # object extent (bounding-box side) as a fraction of the image side
    size_range: tuple[float, float] = (0.3, 0.45)
    max_retries: int = 50

    def validate(self) -> None:
        if self.n_samples < 0:
            raise ConfigError("n_samples must be >= 0")
        lo, hi = self.distractors
        if lo < 0 or hi < lo:
            raise ConfigError("distractors must be a range (lo, hi) with 0 <= lo <= hi")
        if not 0.0 <= self.relational_fraction <= 1.0:
            raise ConfigError("relational_fraction must lie in [0, 1]")
        if not self.shapes or not self.colors:
            raise ConfigError("need at least one shape and one colour")
        lo_s, hi_s = self.size_range
        if not 0 < lo_s <= hi_s < 1:
            raise ConfigError("size_range must satisfy 0 < lo <= hi < 1")


@dataclass
class PathsConfig:
    train_manifest: Optional[str] = None
    eval_manifest: Optional[str] = None
    vocab: Optional[str] = None
    init_checkpoint: Optional[str] = None
    history: Optional[str] = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.data.validate()


def _strip_optional(tp: Any) -> Any:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def from_dict(cls: type, data: dict, where: str = "") -> Any:
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        tp = _strip_optional(hints[key])
        path = f"{where}.{key}" if where else key
        if value is None:
            kwargs[key] = None
        elif dataclasses.is_dataclass(tp):
            kwargs[key] = from_dict(tp, value, path)
        elif typing.get_origin(tp) is tuple:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}: expected a list")
            kwargs[key] = tuple(value)
        elif tp is float and isinstance(value, int) and not isinstance(value, bool):
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def to_dict(obj: Any) -> dict:
    def convert(v: Any) -> Any:
        if isinstance(v, tuple):
            return [convert(x) for x in v]
        if isinstance(v, list):
            return [convert(x) for x in v]
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        return v

    return convert(dataclasses.asdict(obj))


def load_run_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = from_dict(RunConfig, raw)
    cfg.validate()
    return cfg


def config_hash(obj: Any) -> str:
    blob = json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def toy_model_config(**overrides: Any) -> ModelConfig:
    """The desk-scale configuration used throughout the tests."""
    bb_keys = {f.name for f in dataclasses.fields(BackboneConfig)}
    bb = BackboneConfig(**{k: v for k, v in overrides.items() if k in bb_keys})
    rest = {k: v for k, v in overrides.items() if k not in bb_keys}
    cfg = ModelConfig(backbone=bb, **rest)
    cfg.validate()
    return cfg


def risclip_b_config(vocab_size: int = 49408) -> ModelConfig:
    """Full-scale RISCLIP-B hyperparameters (for reference; far beyond desk scale)."""
    bb = BackboneConfig(
        image_size=640, patch_size=16, image_layers=12, text_layers=12,
        image_width=896, text_width=640, shared_dim=640, image_heads=14,
        text_heads=10, context_length=77, vocab_size=vocab_size,
    )
    return ModelConfig(
        backbone=bb, n_cfe=6, n_ske=6, cfe_heads=10, ske_heads=8,
        image_adapter_dim=449, text_adapter_dim=320,
    )


def risclip_l_config(vocab_size: int = 49408) -> ModelConfig:
    bb = BackboneConfig(
        image_size=560, patch_size=14, image_layers=24, text_layers=12,
        image_width=1024, text_width=768, shared_dim=768, image_heads=16,
        text_heads=12, context_length=77, vocab_size=vocab_size,
    )
    return ModelConfig(
        backbone=bb, n_cfe=6, n_ske=6, cfe_heads=12, ske_heads=8,
        image_adapter_dim=512, text_adapter_dim=384,
    )
