"""Run configuration: an INI-style file with sections [model], [train],
[sample], [data] and [metrics]. Missing keys take the defaults below; unknown
sections or keys are rejected."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .metrics import MelConfig
from .model import ModelConfig
from .sampling import SamplerConfig
from .synth import SceneConfig
from .training import TrainConfig


@dataclass
class SampleSection:
    n_steps: int = 32
    guidance_w: float = 4.0
    seed: int = 0
    chunk_seconds: int = 10
    overlap_tokens: int = 22

    def sampler(self, n_levels: int, shortcut: bool) -> SamplerConfig:
        return SamplerConfig(self.n_steps, self.guidance_w, self.seed, n_levels, shortcut)


@dataclass
class DataSection:
    n_clips: int = 256
    seed: int = 7
    duration_min: float = 5.0
    duration_max: float = 15.0
    event_rate: float = 1.0

    def scene_config(self) -> SceneConfig:
        return SceneConfig(duration_range=(self.duration_min, self.duration_max), event_rate=self.event_rate)


@dataclass
class MetricsSection:
    n_projections: int = 100
    seed: int = 0
    n_mels: int = 128
    win_ms: float = 25.0
    hop_ms: float = 10.0
    eps: float = 1e-8
    nonnegative: bool = False

    def mel(self) -> MelConfig:
        return MelConfig(n_mels=self.n_mels, win_ms=self.win_ms, hop_ms=self.hop_ms, eps=self.eps,
                         nonnegative=self.nonnegative)


# The command line defaults to a desk profile: a 2k-step run fits in about ten
# minutes on one CPU core. The library dataclasses keep the full-size values.
def _desk_model() -> ModelConfig:
    return ModelConfig(model_dim=64)


def _desk_train() -> TrainConfig:
    return TrainConfig(lr=1e-3)


DOCS = {
    "model": "velocity network shape (model_dim, heads, n_mm_blocks, n_mm_blocks_with_audio_self_attn, "
             "n_single_blocks, audio_dim, semantic_dim, sync_dim, text_dim, mlp_ratio, freq_dim)",
    "train": "optimisation (batch_size, consistency_ratio, lr, ema_rate, cond_dropout, mask_prob, "
             "mask_span_min, mask_span_max, n_levels, crop_seconds, steps, seed, checkpoint_every)",
    "sample": "sampler (n_steps, guidance_w, seed, chunk_seconds, overlap_tokens)",
    "data": "toy dataset (n_clips, seed, duration_min, duration_max, event_rate)",
    "metrics": "evaluation (n_projections, seed, n_mels, win_ms, hop_ms, eps, nonnegative)",
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=_desk_model)
    train: TrainConfig = field(default_factory=_desk_train)
    sample: SampleSection = field(default_factory=SampleSection)
    data: DataSection = field(default_factory=DataSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        return cls.from_parser(parser)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        return cls.from_parser(parser)

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser) -> "RunConfig":
        base = cls()
        sections = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
        unknown = set(parser.sections()) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        built = {}
        for name, default in sections.items():
            values = dict(parser[name]) if parser.has_section(name) else {}
            built[name] = _override(name, default, values)
        return cls(**built)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"[{f.name}]")
            for sf in dataclasses.fields(getattr(self, f.name)):
                lines.append(f"{sf.name} = {getattr(getattr(self, f.name), sf.name)}")
            lines.append("")
        return "\n".join(lines)


def _coerce(value: str, kind, key: str):
    try:
        if kind in (bool, "bool"):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {getattr(kind, '__name__', kind)}") from exc
    return value


def _override(section: str, default, values: dict):
    fields = {f.name: f for f in dataclasses.fields(default)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    changes = {}
    for key, raw in values.items():
        kind = type(getattr(default, key))
        changes[key] = _coerce(raw, kind, f"{section}.{key}")
    try:
        return dataclasses.replace(default, **changes)
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc
