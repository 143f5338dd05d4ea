"""Pipeline configuration: one dataclass per subsystem, JSON round-trippable.

Every constant used anywhere in the pipeline lives here so a single JSON
document reproduces a run. Loading rejects unknown keys and validates ranges.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Bad configuration document: unknown key or invalid value."""


@dataclass
class AudioConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    win_length: int = 640
    hop_length: int = 320
    n_mels: int = 128
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_eps: float = 1e-5
    # Mel values are min/max normalized to [-1, 1] before diffusion; the
    # bounds are corpus statistics recorded at training time.
    mel_norm_min: float = math.log(1e-5)
    mel_norm_max: float = 2.0
    griffin_lim_iters: int = 60


@dataclass
class RollConfig:
    pitch_min: int = 55
    pitch_max: int = 108
    bend_range_semitones: float = 2.0

    @property
    def n_pitches(self) -> int:
        return self.pitch_max - self.pitch_min + 1


@dataclass
class ModelConfig:
    """Network shape. Desk-scale defaults; full-scale sizes are reachable by
    config (d_model=256, gru_hidden=128, gru_layers=2, tf_layers=6,
    tf_heads=4, tf_ffn=1024, res_channels=256, res_layers=20)."""

    d_model: int = 32
    gru_hidden: int = 16
    gru_layers: int = 1
    tf_layers: int = 2
    tf_heads: int = 2
    tf_ffn: int = 64
    res_channels: int = 32
    res_layers: int = 4
    kernel_size: int = 3
    no_bend: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**_build(cls, doc, path="model"))


@dataclass
class DiffusionConfig:
    synthesis_steps: int = 200
    bend_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.06
    guidance_synthesis: float = 1.25
    guidance_bend: float = 3.0


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    train_steps: int = 2000
    cond_dropout_p: float = 0.1
    crop_synthesis: int = 256
    crop_bend: int = 512
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ckpt_every: int = 500
    log_every: int = 50
    seed: int = 0


@dataclass
class VibratoConfig:
    # Presence rule: DFT peak inside [band_low, band_high] must be the global
    # maximum over [search_low, search_high] and imply a half-extent of at
    # least theta_cents.
    theta_cents: float = 10.0
    band_low_hz: float = 3.0
    band_high_hz: float = 9.0
    search_low_hz: float = 1.0
    search_high_hz: float = 15.0
    min_note_s: float = 0.2
    min_voiced_fraction: float = 0.5
    # Autocorrelation tracker settings.
    yin_threshold: float = 0.15
    f0_min_hz: float = 180.0
    f0_max_hz: float = 4200.0


@dataclass
class CorpusConfig:
    n_pieces: int = 4
    n_performers: int = 4
    seed: int = 0
    piece_len_s: float = 11.0
    note_min_s: float = 0.25
    note_max_s: float = 1.2
    double_stop_prob: float = 0.1
    rest_prob: float = 0.1
    bend_sample_ms: float = 5.0
    release_tail_s: float = 0.04
    n_harmonics: int = 12


@dataclass
class PipelineConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    rolls: RollConfig = field(default_factory=RollConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    vibrato: VibratoConfig = field(default_factory=VibratoConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    seed: int = 0

    def validate(self) -> None:
        a, m, t, d = self.audio, self.model, self.training, self.diffusion
        if a.sample_rate <= 0 or a.hop_length <= 0:
            raise ConfigError("sample_rate and hop_length must be positive")
        if a.win_length > a.n_fft:
            raise ConfigError("win_length must not exceed n_fft")
        if not 0 <= self.rolls.pitch_min <= self.rolls.pitch_max <= 127:
            raise ConfigError("pitch range must satisfy 0 <= min <= max <= 127")
        for name in ("d_model", "gru_hidden", "gru_layers", "tf_layers",
                     "tf_heads", "tf_ffn", "res_channels", "res_layers"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if m.d_model % m.tf_heads != 0:
            raise ConfigError("d_model must be divisible by tf_heads")
        if m.d_model != 2 * m.gru_hidden:
            raise ConfigError("d_model must equal 2 * gru_hidden "
                              "(bidirectional outputs feed the transformer)")
        if m.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd (non-causal, centered)")
        if not 0.0 <= t.cond_dropout_p <= 1.0:
            raise ConfigError("cond_dropout_p must lie in [0, 1]")
        if t.crop_synthesis < 1 or t.crop_bend < 1:
            raise ConfigError("crop lengths must be >= 1")
        if d.synthesis_steps < 1 or d.bend_steps < 1:
            raise ConfigError("diffusion step counts must be >= 1")
        if not 0.0 < d.beta_start < d.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start < beta_end < 1")
        if d.guidance_synthesis < 0 or d.guidance_bend < 0:
            raise ConfigError("guidance weights must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        cfg = cls(**_build(cls, doc, path="config"))
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_json(Path(path).read_text())


def _build(dc_type, doc: dict, path: str) -> dict:
    """Map a JSON dict onto dataclass fields, recursing into sub-configs and
    rejecting keys that name no field."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name for f in dataclasses.fields(dc_type)}
    kwargs = {}
    for key, value in doc.items():
        if key not in fields:
            raise ConfigError(f"{path}: unknown key {key!r}")
        sub = _SUBCONFIGS.get(key) if dc_type is PipelineConfig else None
        if sub is not None:
            kwargs[key] = sub(**_build(sub, value, f"{path}.{key}"))
        else:
            kwargs[key] = value
    return kwargs


_SUBCONFIGS = {
    "audio": AudioConfig,
    "rolls": RollConfig,
    "model": ModelConfig,
    "diffusion": DiffusionConfig,
    "training": TrainConfig,
    "vibrato": VibratoConfig,
    "corpus": CorpusConfig,
}

ENV_CONFIG_VAR = "VIOLINDIFF_CONFIG"


def resolve_config(path: str | None) -> PipelineConfig:
    """Load a config from --config, else from $VIOLINDIFF_CONFIG, else defaults."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR)
    if path is None:
        cfg = PipelineConfig()
        cfg.validate()
        return cfg
    return PipelineConfig.load(path)
