"""Model, schedule, and training-loop configuration.

Configs serialize to a flat `key = value` text format (one key per line,
`#` comments allowed).  Parsing is strict: unknown keys are errors, and the
writer emits keys in a fixed order so that write -> read -> write is
byte-identical.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass

from .errors import ConfigError

VARIANTS = ("a", "b", "c", "d", "e")


@dataclass
class ModelConfig:
    """Architectural hyperparameters for one speaker model."""

    n_encoder_layers: int = 6
    n_decoder_layers: int = 3
    d_model: int = 512
    d_ff: int = 2048
    heads: int = 8
    dropout: float = 0.1
    variant: str = "e"
    mask_mode: str = "post_softmax"
    multi_view: bool = True
    cls_policy: str = "windowed"
    mv_scope: str = "encoder_only"
    feature_dim: int = 80
    embedding_dim: int = 512
    n_speakers: int = 1251
    positional_encoding: bool = True
    per_layer_windows: str = ""  # override hook: "1,3,9;1,5,17" = windows per layer

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mask_mode not in ("post_softmax", "pre_softmax"):
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")
        if self.cls_policy not in ("windowed", "global"):
            raise ConfigError(f"unknown cls_policy {self.cls_policy!r}")
        if self.mv_scope not in ("encoder_only", "encoder_and_decoder"):
            raise ConfigError(f"unknown mv_scope {self.mv_scope!r}")
        for name in ("d_model", "d_ff", "heads", "feature_dim", "embedding_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_encoder_layers < 0 or self.n_decoder_layers < 0:
            raise ConfigError("layer counts must be nonnegative")
        if self.n_speakers < 2:
            raise ConfigError(f"n_speakers must be >= 2, got {self.n_speakers}")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.variant == "c" and self.embedding_dim != self.d_model:
            raise ConfigError(
                f"variant c emits the raw encoder mean, so embedding_dim must equal "
                f"d_model ({self.d_model}), got {self.embedding_dim}"
            )
        if self.variant in ("a", "b") and self.n_decoder_layers < 1:
            raise ConfigError(f"variant {self.variant} needs at least one decoder layer")
        return self

    @property
    def uses_decoder(self) -> bool:
        return self.variant in ("a", "b")

    @property
    def uses_cls(self) -> bool:
        return self.variant in ("a", "b", "d")


@dataclass
class ScheduleConfig:
    """Triangular cyclical learning-rate schedule bounds."""

    lr_min: float = 1e-8
    lr_max: float = 5e-4
    cycle_steps: int = 60000
    n_cycles: int = 2

    def validate(self) -> "ScheduleConfig":
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"lr_min must be below lr_max, got {self.lr_min} >= {self.lr_max}")
        if self.cycle_steps < 2 or self.cycle_steps % 2 != 0:
            raise ConfigError(f"cycle_steps must be a positive even integer, got {self.cycle_steps}")
        if self.n_cycles < 1:
            raise ConfigError(f"n_cycles must be >= 1, got {self.n_cycles}")
        return self

    @property
    def total_steps(self) -> int:
        return self.cycle_steps * self.n_cycles


@dataclass
class TrainingConfig:
    """Everything a training run needs besides the data and the seed."""

    model: ModelConfig
    schedule: ScheduleConfig
    batch_size: int = 64
    grad_accum: int = 1
    steps: int = 0  # 0 = schedule.total_steps
    crop_frames: int = 200
    spec_augment: bool = True
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    log_interval: int = 50
    checkpoint_interval: int = 500

    def validate(self) -> "TrainingConfig":
        self.model.validate()
        self.schedule.validate()
        for name in ("batch_size", "grad_accum", "crop_frames", "log_interval", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("steps, weight_decay and grad_clip must be nonnegative")
        return self

    @property
    def total_steps(self) -> int:
        return self.steps if self.steps > 0 else self.schedule.total_steps


def _field_types(cls, skip=()) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name not in skip}


_MODEL_FIELDS = _field_types(ModelConfig)
_SCHEDULE_FIELDS = _field_types(ScheduleConfig)
_TRAIN_FIELDS = _field_types(TrainingConfig, skip=("model", "schedule"))


def _parse_value(key: str, raw: str, typ) -> object:
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r} as {typ.__name__}") from None


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> TrainingConfig:
    """Parse the flat `key = value` format; unknown keys are errors."""
    model_kwargs: dict[str, object] = {}
    schedule_kwargs: dict[str, object] = {}
    train_kwargs: dict[str, object] = {}
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key in _MODEL_FIELDS:
            model_kwargs[key] = _parse_value(key, raw, _MODEL_FIELDS[key])
        elif key in _SCHEDULE_FIELDS:
            schedule_kwargs[key] = _parse_value(key, raw, _SCHEDULE_FIELDS[key])
        elif key in _TRAIN_FIELDS:
            train_kwargs[key] = _parse_value(key, raw, _TRAIN_FIELDS[key])
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    config = TrainingConfig(
        model=ModelConfig(**model_kwargs),
        schedule=ScheduleConfig(**schedule_kwargs),
        **train_kwargs,
    )
    return config.validate()


def format_config(config: TrainingConfig) -> str:
    """Serialize in fixed field order; reparsing reproduces the text exactly."""
    lines = []
    for name in _MODEL_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(config.model, name))}")
    for name in _SCHEDULE_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(config.schedule, name))}")
    for name in _TRAIN_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(config, name))}")
    return "\n".join(lines) + "\n"


def format_model_config(model: ModelConfig) -> str:
    """Serialize just the architecture block (used in checkpoint headers)."""
    return "\n".join(f"{name} = {_format_value(getattr(model, name))}" for name in _MODEL_FIELDS) + "\n"


def parse_model_config(text: str) -> ModelConfig:
    """Inverse of format_model_config; unknown or duplicate keys are errors."""
    kwargs: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _MODEL_FIELDS:
            raise ConfigError(f"line {lineno}: unknown architecture key {key!r}")
        if key in kwargs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kwargs[key] = _parse_value(key, raw, _MODEL_FIELDS[key])
    return ModelConfig(**kwargs).validate()


def load_config(path) -> TrainingConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def save_config(config: TrainingConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_config(config))
