"""Run configuration: flat dataclasses, JSON round-trip with dotted keys.

Precedence when assembling a run: CLI flag > config file > default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """Bad or inconsistent configuration."""


@dataclass
class ModelConfig:
    d: int = 64
    n_tokens: int = 64
    layers: int = 4
    heads: int = 4
    span: int = 8
    num_bins: int = 128
    image_size: int = 128
    in_channels: int = 1
    cnn_channels: tuple[int, int, int] = (16, 32, 64)
    vocab_cap: int = 2000
    token_grid: tuple[int, int] = (8, 8)
    dropout: float = 0.0
    inject_spatial_into_hidden: bool = True
    share_spatial_weights: bool = True

    def validate(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.image_size % 8 != 0:
            raise ConfigError(f"image_size={self.image_size} must be divisible by 8 (CNN stride)")
        gh, gw = self.token_grid
        if gh * gw != self.n_tokens:
            raise ConfigError(
                f"token_grid {self.token_grid} does not tile n_tokens={self.n_tokens}"
            )
        if self.image_size % (4 * gh) or self.image_size % (4 * gw):
            raise ConfigError(
                f"image_size={self.image_size} not divisible by 4*token_grid={self.token_grid}"
            )
        if self.span < 0:
            raise ConfigError("span must be >= 0")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def feature_cells(self) -> int:
        side = self.image_size // 8
        return side * side


@dataclass
class OptimConfig:
    lr: float = 5e-5
    warmup_fraction: float = 0.10
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")


@dataclass
class LossWeights:
    mlm: float = 5.0
    ltr: float = 1.0
    tdi: float = 5.0

    def validate(self):
        if min(self.mlm, self.ltr, self.tdi) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    epochs: int = 5
    batch_size: int = 8
    head_variant: str = "linear"  # or "deeper"
    mlm_rate: float = 0.15
    tdi_mismatch_rate: float = 0.20
    finetune_lr: float = 2.5e-5
    finetune_warmup_fraction: float = 0.0
    finetune_epochs: int = 10

    def validate(self):
        self.model.validate()
        self.optim.validate()
        self.loss.validate()
        if self.head_variant not in ("linear", "deeper"):
            raise ConfigError(f"head_variant must be linear|deeper, got {self.head_variant!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


_SECTIONS = {"model": ModelConfig, "optim": OptimConfig, "loss": LossWeights}
_TUPLE_FIELDS = {"cnn_channels", "token_grid"}


def to_flat_dict(cfg: RunConfig) -> dict:
    out = {}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            v = getattr(sub, f.name)
            out[f"{section}.{f.name}"] = list(v) if isinstance(v, tuple) else v
    for f in fields(RunConfig):
        if f.name in _SECTIONS:
            continue
        out[f.name] = getattr(cfg, f.name)
    return out


def apply_flat(cfg: RunConfig, flat: dict) -> RunConfig:
    """Set dotted keys on a copy of cfg; unknown keys are ConfigError."""
    cfg = dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model),
        optim=dataclasses.replace(cfg.optim),
        loss=dataclasses.replace(cfg.loss),
    )
    top_fields = {f.name: f for f in fields(RunConfig)}
    for key, value in flat.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section in {key!r}")
            sub = getattr(cfg, section)
            sub_fields = {f.name for f in fields(sub)}
            if name not in sub_fields:
                raise ConfigError(f"unknown config key {key!r}")
            if name in _TUPLE_FIELDS and isinstance(value, (list, tuple)):
                value = tuple(int(v) for v in value)
            setattr(sub, name, value)
        else:
            if key not in top_fields or key in _SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    return cfg


def load_config_file(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            flat = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(flat, dict):
        raise ConfigError(f"{path}: config file must be a flat JSON object")
    return apply_flat(base or RunConfig(), flat)


def save_config_file(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_flat_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
