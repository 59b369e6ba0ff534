"""Flat ``key = value`` configuration records.

Files hold one assignment per line; ``#`` starts a comment.  Lists are
comma-separated.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

DCASE2020_LABELS = (
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
)

ATTENTION_KINDS = ("none", "se", "cbam", "se+cbam")


def parse_lines(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _coerce(key: str, raw: str, tp) -> Any:
    tp, optional = _strip_optional(tp)
    if optional and raw.lower() in ("", "none"):
        return None
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            args = typing.get_args(tp)
            elem = args[0]
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_coerce(key, s, elem) for s in items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _emit(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_emit(v) for v in value)
    return str(value)


def to_text(record) -> str:
    """Canonical text: one ``key = value`` line per field, declaration order."""
    return "".join(f"{f.name} = {_emit(getattr(record, f.name))}\n" for f in fields(record))


def from_mapping(cls, values: dict[str, str], prefix: str = ""):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(k for k in values if k not in known)
    if unknown:
        raise ConfigError(f"unknown {prefix}key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(prefix + k, v, hints[k]) for k, v in values.items()}
    return cls(**kwargs)


def from_text(cls, text: str):
    return from_mapping(cls, parse_lines(text))


@dataclass
class LCNNConfig:
    """Network shape and attention switch."""

    input_frames: int = 250
    input_bins: int = 128
    channels: tuple[int, ...] = (64, 96, 128, 64, 64)
    attention: str = "cbam"
    num_classes: int = 10
    embedding_dim: int = 80
    reduction: int = 4
    cbam_kernel: int = 7
    labels: tuple[str, ...] = DCASE2020_LABELS

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.labels = tuple(self.labels)
        self.validate()

    def validate(self) -> None:
        problems = []
        if len(self.channels) != 5:
            problems.append(f"channels needs 5 entries, got {len(self.channels)}")
        if any(c <= 0 or c % 2 for c in self.channels):
            problems.append(f"channels must be positive and even (MFM halves them): {self.channels}")
        if self.input_frames < 16:
            problems.append(f"input_frames={self.input_frames} < 16 (four pooling halvings)")
        if self.input_bins < 3:
            problems.append(f"input_bins={self.input_bins} < 3 (first kernel spans 3 bins)")
        if self.attention not in ATTENTION_KINDS:
            problems.append(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.embedding_dim < 1:
            problems.append("embedding_dim must be >= 1")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if len(self.labels) != self.num_classes:
            problems.append(f"{len(self.labels)} labels for num_classes={self.num_classes}")
        if len(set(self.labels)) != len(self.labels):
            problems.append("labels must be distinct")
        if self.cbam_kernel < 1 or self.cbam_kernel % 2 == 0:
            problems.append(f"cbam_kernel must be odd, got {self.cbam_kernel}")
        if self.attention != "none":
            for c in self.channels[1:]:
                if (c // 2) % self.reduction:
                    problems.append(f"attention width {c // 2} not divisible by reduction {self.reduction}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class AugmentConfig:
    use_mixup: bool = False
    use_specaug: bool = False
    mixup_alpha: float = 0.2
    mixup_per_example: bool = False
    n_time_masks: int = 2
    n_freq_masks: int = 2
    max_time_width: int = 40
    max_freq_width: int = 16

    def __post_init__(self):
        problems = []
        if self.mixup_alpha <= 0:
            problems.append(f"mixup_alpha must be > 0, got {self.mixup_alpha}")
        for name in ("n_time_masks", "n_freq_masks", "max_time_width", "max_freq_width"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class TrainConfig:
    lr0: float = 0.001
    batch_size: int = 24
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 70
    t0: int = 10
    t_mult: int = 2
    eta_min: float = 1e-6
    seed: int = 0
    crop_frames: int = 250
    eval_every: int = 1
    stop_at_train_acc: Optional[float] = None
    logit_mean: bool = False

    def __post_init__(self):
        problems = []
        if self.lr0 <= 0:
            problems.append(f"lr0 must be > 0, got {self.lr0}")
        if self.batch_size < 2:
            problems.append(f"batch_size must be >= 2 (mix-up needs pairs), got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.t0 < 1 or self.t_mult < 1:
            problems.append("t0 and t_mult must be >= 1")
        if not 0 <= self.eta_min < self.lr0:
            problems.append("eta_min must lie in [0, lr0)")
        if self.eval_every < 0:
            problems.append("eval_every must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class FeatureConfig:
    sample_rate: int = 44100
    n_fft: int = 2048
    win_ms: float = 40.0
    hop_ms: float = 20.0
    n_mels: int = 128
    fmin: float = 0.0
    fmax: Optional[float] = None

    @property
    def win_samples(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    def __post_init__(self):
        if self.win_samples > self.n_fft:
            raise ConfigError(f"window of {self.win_samples} samples exceeds n_fft={self.n_fft}")
        if self.hop_samples < 1 or self.n_mels < 1:
            raise ConfigError("hop and n_mels must be positive")


@dataclass
class PathConfig:
    index: str = ""
    cache_dir: str = ""
    model: str = "model.lcnn"
    log: str = "train.log"


_SECTIONS = (
    ("model", LCNNConfig),
    ("train", TrainConfig),
    ("augment", AugmentConfig),
    ("features", FeatureConfig),
    ("paths", PathConfig),
)


@dataclass
class RunConfig:
    """Everything one training run needs, as a flat ``section.key`` file."""

    model: LCNNConfig = field(default_factory=LCNNConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def __post_init__(self):
        if self.features.n_mels != self.model.input_bins:
            raise ConfigError(
                f"features.n_mels={self.features.n_mels} != model.input_bins={self.model.input_bins}"
            )
        if self.train.crop_frames != self.model.input_frames:
            raise ConfigError(
                f"train.crop_frames={self.train.crop_frames} != model.input_frames={self.model.input_frames}"
            )

    def to_text(self) -> str:
        lines = []
        for section, _ in _SECTIONS:
            lines.append(f"# {section}\n")
            for line in to_text(getattr(self, section)).splitlines(keepends=True):
                lines.append(f"{section}.{line}")
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        grouped: dict[str, dict[str, str]] = {name: {} for name, _ in _SECTIONS}
        for key, value in parse_lines(text).items():
            section, _, sub = key.partition(".")
            if section not in grouped or not sub:
                raise ConfigError(f"unknown key: {key}")
            grouped[section][sub] = value
        parts = {name: from_mapping(kind, grouped[name], prefix=f"{name}.") for name, kind in _SECTIONS}
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)
