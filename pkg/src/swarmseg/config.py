"""Configuration dataclasses and JSON loading."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass(frozen=True)
class WorldConfig:
    world_rows: int = 128
    world_cols: int = 128
    view_rows: int = 64
    view_cols: int = 64
    feat_rows: int = 8
    feat_cols: int = 8
    n_classes: int = 6
    n_agents: int = 6
    overlap_target: float = 0.37
    rotations: bool = True
    region_size: int = 20
    texture_amplitude: float = 0.12
    texture_sigma: float = 3.0
    obstruction_min: int = 8
    obstruction_max: int = 20
    obstruction_prob: float = 1.0
    obstruction_kind: str = "rect"
    seed: int = 0

    @property
    def patch(self) -> int:
        return self.view_rows // self.feat_rows

    def validate(self) -> None:
        if self.view_rows % self.feat_rows or self.view_cols % self.feat_cols:
            raise ConfigError("view dims must be divisible by feature dims")
        if self.view_rows // self.feat_rows != self.view_cols // self.feat_cols:
            raise ConfigError("patches must be square")
        if self.world_rows < self.view_rows or self.world_cols < self.view_cols:
            raise ConfigError("world must be at least as large as a viewport")
        if self.rotations and self.view_rows != self.view_cols:
            raise ConfigError("right-angle rotations need square viewports")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.n_agents < 1:
            raise ConfigError("need at least one agent")
        if not 0.0 <= self.overlap_target <= 1.0:
            raise ConfigError("overlap_target must lie in [0, 1]")
        if self.obstruction_min < 0 or self.obstruction_max < self.obstruction_min:
            raise ConfigError("bad obstruction size range")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    hidden_dim: int = 16
    query_dim: int = 16
    key_dim: int = 16
    smoother_width: int = 64
    metric: str = "l2"
    softmax_scale: float = 1.0
    stack_agents: int = 6

    def validate(self) -> None:
        if self.query_dim > self.key_dim:
            raise ConfigError("query dim must not exceed key dim")
        if min(self.feature_dim, self.hidden_dim, self.query_dim, self.key_dim) < 1:
            raise ConfigError("all channel dims must be positive")
        if self.metric not in ("l2", "l1", "cosine"):
            raise ConfigError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.01
    corr_weight: float = 0.1
    fusion: str = "soft"
    seed: int = 0
    dataset: str | None = None
    target: int = -1
    batch_size: int = 1
    momentum: float = 0.9
    clip_norm: float | None = None
    n_samples: int = 48
    optimizer: str = "sgd"
    # the smoother's output bias sets the no-match offset and needs a faster rate than its weights
    lr_scales: dict[str, float] = field(
        default_factory=lambda: {"smoother.": 0.01, "smoother.conv3.bias": 0.3}
    )
    calibrate: bool = True
    tie_codec: bool = True
    lr_schedule: str = "cosine"
    fused_weight: float = 1.0
    # smoother refinement on frozen volumes (0 epochs skips it)
    smoother_epochs: int = 20
    smoother_lr: float = 1e-3
    corrupt_frac: float = 0.3
    smoother_targets: int = 6

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.smoother_epochs < 0:
            raise ConfigError("smoother_epochs must be >= 0")
        if not 0.0 <= self.corrupt_frac <= 1.0:
            raise ConfigError("corrupt_frac must lie in [0, 1]")
        if self.fused_weight < 0:
            raise ConfigError("fused_weight must be >= 0")
        if self.corr_weight < 0:
            raise ConfigError("corr_weight must be >= 0")
        if self.fusion not in ("soft", "stacked"):
            raise ConfigError("training fusion must be 'soft' or 'stacked'")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if any(v < 0 for v in self.lr_scales.values()):
            raise ConfigError("lr_scales must be non-negative")


@dataclass(frozen=True)
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    wire_bytes: int = 4

    def validate(self) -> Config:
        self.world.validate()
        self.model.validate()
        self.train.validate()
        if self.wire_bytes not in (2, 4, 8):
            raise ConfigError("wire_bytes must be 2, 4 or 8")
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **sections: dict[str, Any]) -> Config:
        cfg = self
        for section, values in sections.items():
            if not values:
                continue
            current = getattr(cfg, section)
            cfg = replace(cfg, **{section: _replace_checked(current, values)})
        return cfg


def _replace_checked(obj, values: dict[str, Any]):
    known = {f.name for f in fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {type(obj).__name__} keys: {sorted(unknown)}")
    return replace(obj, **values)


def config_from_dict(data: dict[str, Any]) -> Config:
    data = dict(data)
    sections = {k: data.pop(k, None) or {} for k in ("world", "model", "train")}
    cfg = Config()
    if "wire_bytes" in data:
        cfg = replace(cfg, wire_bytes=int(data.pop("wire_bytes")))
    if data:
        raise ConfigError(f"unknown top-level config keys: {sorted(data)}")
    return cfg.with_overrides(**sections).validate()


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config().validate()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config JSON must be an object")
    return config_from_dict(data)
