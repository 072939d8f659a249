"""Pipeline configuration: one JSON document with four sections.

Every key is validated against the section dataclasses; unknown keys are
rejected by name so a typo cannot silently fall back to a default. The
generator's codebook size is always derived from the codec level list,
never stated twice.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

from .codec import CodecTrainConfig, FsqConfig, LossConfig
from .errors import ConfigError, FormatError
from .generator import GadgConfig, GeneratorTrainConfig

CONFIG_ENV_VAR = "DANCEGEN_CONFIG"


@dataclass
class HfdqSection:
    levels: tuple = (7, 5, 5, 5, 5)
    feature_dim: int = 64
    velocity_weight: float = 0.5
    accel_weight: float = 0.25
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    noise_clips: int = 0


@dataclass
class GadgSection:
    model_dim: int = 128
    num_genres: int = 4
    num_layers: int = 2
    num_heads: int = 8
    ff_dim: int = 512
    dropout: float = 0.25
    state_dim: int = 16
    conv_kernel: int = 4
    expand: int = 2
    autoregressive_step: int = 22
    window_step: int = 8
    max_positions: int = 256
    steps: int = 3000
    batch_size: int = 4
    lr: float = 3e-4
    top_k: int | None = None
    temperature: float = 1.0


@dataclass
class DataSection:
    seed: int = 0
    clip_frames: int = 240
    num_genres: int = 4


@dataclass
class MetricsSection:
    bas_sigma: float = 3.0
    feature_kinds: tuple = ("kinetic", "geometric")


_SECTIONS = {
    "hfdq": HfdqSection,
    "gadg": GadgSection,
    "data": DataSection,
    "metrics": MetricsSection,
}


@dataclass
class PipelineConfig:
    hfdq: HfdqSection = field(default_factory=HfdqSection)
    gadg: GadgSection = field(default_factory=GadgSection)
    data: DataSection = field(default_factory=DataSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def __post_init__(self):
        if self.gadg.autoregressive_step < self.gadg.window_step:
            raise ConfigError(
                f"autoregressive_step {self.gadg.autoregressive_step} must be >= "
                f"window_step {self.gadg.window_step}"
            )
        if self.gadg.num_genres != self.data.num_genres:
            raise ConfigError(
                f"gadg.num_genres {self.gadg.num_genres} != data.num_genres "
                f"{self.data.num_genres}; the router needs one expert per genre"
            )

    @property
    def codebook_size(self) -> int:
        return math.prod(self.hfdq.levels)

    def fsq_config(self) -> FsqConfig:
        return FsqConfig(levels=tuple(self.hfdq.levels), feature_dim=self.hfdq.feature_dim)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            velocity_weight=self.hfdq.velocity_weight,
            accel_weight=self.hfdq.accel_weight,
        )

    def codec_train_config(self) -> CodecTrainConfig:
        return CodecTrainConfig(
            steps=self.hfdq.steps, batch_size=self.hfdq.batch_size,
            lr=self.hfdq.lr, seed=self.data.seed, noise_clips=self.hfdq.noise_clips,
        )

    def gadg_config(self) -> GadgConfig:
        g = self.gadg
        return GadgConfig(
            model_dim=g.model_dim, num_genres=g.num_genres, num_layers=g.num_layers,
            num_heads=g.num_heads, ff_dim=g.ff_dim, dropout=g.dropout,
            state_dim=g.state_dim, conv_kernel=g.conv_kernel, expand=g.expand,
            autoregressive_step=g.autoregressive_step, window_step=g.window_step,
            codebook_size=self.codebook_size, max_positions=g.max_positions,
        )

    def generator_train_config(self) -> GeneratorTrainConfig:
        return GeneratorTrainConfig(
            steps=self.gadg.steps, batch_size=self.gadg.batch_size,
            lr=self.gadg.lr, seed=self.data.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _section_from_dict(name: str, cls, raw: dict):
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(
            f"unknown config key {sorted(unknown)[0]!r} in section {name!r}"
        )
    kwargs = dict(raw)
    for key in ("levels", "feature_kinds"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def config_from_dict(raw: dict) -> PipelineConfig:
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section {sorted(unknown)[0]!r}")
    sections = {
        name: _section_from_dict(name, cls, raw.get(name, {}))
        for name, cls in _SECTIONS.items()
    }
    return PipelineConfig(**sections)


def load_config(path=None) -> PipelineConfig:
    """Read a JSON pipeline config; fall back to $DANCEGEN_CONFIG, then to
    built-in desk-scale defaults when neither is given."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return PipelineConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise FormatError(f"cannot read config {path}: {e}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: config root must be a JSON object")
    return config_from_dict(raw)
