"""Run configuration: nested dataclasses loaded from JSON with strict keys."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cwt import ScaleGrid
from .preprocess import AlsConfig, PeakConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Signal-to-image settings shared by dataset generation and scanning."""

    als_lambda: float = 1e4
    als_w: float = 0.5
    peak_min_height: float = 0.1
    peak_min_spacing_seconds: float = 10.0
    window_seconds: float = 10.0
    min_scale: float = 0.2
    max_scale: float = 5.0
    n_scales: int = 32
    image_size: int = 64
    normalization: str = "per-image"
    amplitude: float | None = None
    probe_stride_seconds: float = 10.0
    oob_clearance_seconds: float = 10.0

    def __post_init__(self):
        self.als
        self.peaks
        self.scale_grid
        if self.normalization not in ("per-image", "global"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        if self.oob_clearance_seconds < self.window_seconds / 2:
            raise ConfigError("oob_clearance_seconds must be at least half a window")
        if not self.window_seconds > 0 or not self.probe_stride_seconds > 0:
            raise ConfigError("window and probe stride must be positive")

    @property
    def als(self):
        return AlsConfig(self.als_lambda, self.als_w)

    @property
    def peaks(self):
        return PeakConfig(self.peak_min_height, self.peak_min_spacing_seconds)

    @property
    def scale_grid(self):
        return ScaleGrid.logspace(self.min_scale, self.max_scale, self.n_scales)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic trace layout and anomaly magnitudes."""

    n_per_class: int = 56
    duration: float = 60.0
    dt: float = 0.1
    rise_time: float = 20.0
    fall_time: float = 40.0
    time_jitter: float = 1.0
    level_low: float = 0.3
    level_high: float = 1.0
    noise_sigma: float = 0.01
    shift_seconds: float = 2.0
    factors: tuple = (0.5, 0.75, 1.2, 1.5, 2.5)
    dataset3_normalization: str = "global"

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(float(f) for f in self.factors))
        if self.n_per_class < 4:
            raise ConfigError("n_per_class must be at least 4")
        if not 0 < self.rise_time < self.fall_time < self.duration:
            raise ConfigError("need 0 < rise_time < fall_time < duration")
        if not 0 <= self.level_low <= self.level_high <= 1:
            raise ConfigError("levels must satisfy 0 <= low <= high <= 1")
        if any(f <= 0 for f in self.factors):
            raise ConfigError("amplitude factors must be positive")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    train_fraction: float = 0.7
    augment: str | None = "task1"
    augment_probability: float = 0.5
    channels: tuple = (16, 32, 64)
    head: str = "flatten"
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.augment not in (None, "task1", "histeq"):
            raise ConfigError(f"unknown augmentation {self.augment!r}")
        if not 0 <= self.augment_probability <= 1:
            raise ConfigError("augment_probability must lie in [0, 1]")
        if self.head not in ("gap", "flatten"):
            raise ConfigError(f"unknown head {self.head!r}")


def _siamese_train_defaults():
    return TrainConfig(train_fraction=0.75, augment="histeq", epochs=30, channels=(8, 16, 32, 64))


def _table3_train_defaults():
    return TrainConfig(augment=None, epochs=60, batch_size=12)


@dataclass(frozen=True)
class EvalConfig:
    n_way: int = 20
    trials: int | None = None
    threshold: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_way < 2:
            raise ConfigError("n_way must be at least 2")
        if self.trials is not None and self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if not 0 <= self.threshold <= 1:
            raise ConfigError("threshold must lie in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    siamese_train: TrainConfig = field(default_factory=_siamese_train_defaults)
    table3_train: TrainConfig = field(default_factory=_table3_train_defaults)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, data, base=None):
        """Overlay ``data`` on ``base`` (defaults if None); unknown keys are errors."""
        base = base or cls()
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        kwargs = {}
        for key, value in data.items():
            if key not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(f"unknown configuration key {key!r}")
            current = getattr(base, key)
            if dataclasses.is_dataclass(current):
                kwargs[key] = _overlay(current, value, key)
            else:
                kwargs[key] = value
        try:
            return dataclasses.replace(base, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=int(seed))


def _overlay(obj, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be an object")
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {unknown}")
    try:
        return dataclasses.replace(obj, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
