"""Configuration dataclasses and the YAML run-config loader."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .exceptions import ConfigError

VARIANTS = ("xprotonet", "patch", "gap")
BACKBONES = ("small_cnn", "tiny_cnn", "resnet18", "resnet50")


@dataclass
class ModelConfig:
    num_classes: int = 3
    prototypes_per_class: int = 3
    feature_dim: int = 128
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    backbone_id: str = "small_cnn"
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    module_hidden: int = 64
    variant: str = "xprotonet"
    patch_r: int = 1
    norm_floor: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.backbone_channels = tuple(int(v) for v in self.backbone_channels)
        if self.num_classes < 1 or self.prototypes_per_class < 1 or self.feature_dim < 1:
            raise ConfigError("model: num_classes, prototypes_per_class and feature_dim must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant: expected one of {VARIANTS}, got {self.variant!r}")
        if self.backbone_id not in BACKBONES:
            raise ConfigError(f"model.backbone_id: expected one of {BACKBONES}, got {self.backbone_id!r}")
        stride = self.backbone_stride
        h0, w0 = self.input_size
        if h0 % stride or w0 % stride:
            raise ConfigError(
                f"model.input_size: {self.input_size} not divisible by backbone stride {stride}"
            )
        if self.variant == "patch":
            h, w = self.feature_grid
            if not 1 <= self.patch_r <= min(h, w):
                raise ConfigError(f"model.patch_r: must lie in [1, {min(h, w)}], got {self.patch_r}")

    @property
    def backbone_stride(self) -> int:
        if self.backbone_id == "small_cnn":
            return 2 ** len(self.backbone_channels)
        if self.backbone_id == "tiny_cnn":
            return 4
        return 32

    @property
    def feature_grid(self) -> tuple[int, int]:
        s = self.backbone_stride
        return self.input_size[0] // s, self.input_size[1] // s


@dataclass
class LossConfig:
    lambda_clst: float = 0.5
    lambda_sep: float = 0.5
    lambda_occur: float = 0.5
    gamma: float = 2.0
    # prior-condition per-subset weights for clst/sep
    lambda_annotated: float = 1.5
    lambda_unannotated: float = 0.5
    affine_ratios: tuple[float, ...] = (0.75, 0.875)

    def __post_init__(self):
        self.affine_ratios = tuple(float(r) for r in self.affine_ratios)
        for name in ("lambda_clst", "lambda_sep", "lambda_occur", "gamma",
                     "lambda_annotated", "lambda_unannotated"):
            v = float(getattr(self, name))
            if not (v >= 0 and v < float("inf")):
                raise ConfigError(f"loss.{name}: must be finite and >= 0, got {v}")
            setattr(self, name, v)


@dataclass
class TrainConfig:
    batch_size: int = 32
    warmup_epochs: int = 5
    early_stop_patience: int = 3
    max_joint_epochs: int = 30
    head_epochs: int = 5
    min_cycles: int = 1
    max_cycles: int = 5
    convergence_tol: float = 1e-4
    optimizer: str = "adam"
    lr_modules: float = 1e-3
    lr_prototypes: float = 1e-3
    lr_backbone: float = 1e-4
    lr_backbone_warmup: float = 0.0
    lr_head: float = 1e-3
    weight_decay: float = 0.0
    augment: bool = True
    prior_condition: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "warmup_epochs", "early_stop_patience", "max_joint_epochs",
                     "head_epochs", "min_cycles", "max_cycles"):
            if int(getattr(self, name)) < 1 and name != "warmup_epochs":
                raise ConfigError(f"train.{name}: must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("train.warmup_epochs: must be >= 0")
        for name in ("lr_modules", "lr_prototypes", "lr_backbone", "lr_head"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name}: must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train.optimizer: expected 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | nih
    root: str | None = None
    labels_csv: str | None = None
    bbox_csv: str | None = None
    images_dir: str | None = None
    test_ids: str | None = None
    split_mode: str = "holdout"
    fold: int = 0
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None
    # synthetic section
    image_size: int = 64
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    noise: float = 0.08
    annotated_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.source not in ("synthetic", "nih"):
            raise ConfigError(f"data.source: expected 'synthetic' or 'nih', got {self.source!r}")
        if self.split_mode not in ("holdout", "five-fold"):
            raise ConfigError(f"data.split_mode: expected 'holdout' or 'five-fold', got {self.split_mode!r}")


@dataclass
class ExplainConfig:
    contour_level: float = 0.3
    colormap: str = "jet"
    alpha: float = 0.4
    max_images: int = 8


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))


def desk_scale() -> RunConfig:
    """Defaults sized for a few minutes on one CPU core."""
    return RunConfig(
        model=ModelConfig(num_classes=3, prototypes_per_class=3, feature_dim=32,
                          input_size=(64, 64), backbone_channels=(16, 32, 32, 32),
                          module_hidden=32, norm_floor=0.1),
        loss=LossConfig(lambda_occur=0.1),
        train=TrainConfig(batch_size=32, warmup_epochs=5, early_stop_patience=3,
                          max_joint_epochs=12, head_epochs=3, min_cycles=2, max_cycles=3,
                          lr_backbone=1e-3),
    )


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "train": TrainConfig,
             "data": DataConfig, "explain": ExplainConfig}


def config_from_dict(raw: dict | None, base: RunConfig | None = None) -> RunConfig:
    """Overlay ``raw`` on ``base`` (desk-scale defaults when omitted).

    Unknown sections or keys raise :class:`ConfigError` naming the key.
    """
    base = base if base is not None else desk_scale()
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    sections = {}
    for name, cls in _SECTIONS.items():
        current = dataclasses.asdict(getattr(base, name))
        overrides = raw.get(name) or {}
        if not isinstance(overrides, dict):
            raise ConfigError(f"{name}: section must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in overrides:
            if key not in known:
                raise ConfigError(f"{name}.{key}: unknown key")
        current.update(overrides)
        try:
            sections[name] = cls(**current)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(f"{key}: unknown section")
    return RunConfig(**sections)


def load_config(path: str | Path | None, base: RunConfig | None = None) -> RunConfig:
    if path is None:
        return config_from_dict({}, base)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config: file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    cfg = config_from_dict(raw, base)
    _check_paths(cfg)
    return cfg


def _check_paths(cfg: RunConfig) -> None:
    d = cfg.data
    for key in ("root", "labels_csv", "bbox_csv", "images_dir", "test_ids"):
        value = getattr(d, key)
        if value is not None and d.source == "nih" and not Path(value).exists():
            raise ConfigError(f"data.{key}: path does not exist: {value}")


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
