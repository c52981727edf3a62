"""Global configuration: schedule, model, codec, and path defaults, loadable
from a single JSON file for the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .denoiser import DenoiserConfig
from .errors import FormatError


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class SamplerDefaults:
    kind: str = "ddim"
    steps: int = 50
    guidance_scale: float = 9.0
    personalized_guidance_scale: float = 15.0
    eta: float = 0.0


@dataclass
class CodecConfig:
    mode: str = "conv_ae"  # identity | conv_ae
    train_steps: int = 2000
    latent_channels: int = 4


@dataclass
class TrainConfig:
    base_steps: int = 5000
    structure_steps: int = 3000
    batch_size: int = 4
    train_frames: int = 8
    base_lr: float = 2e-4
    structure_lr: float = 1e-3
    cfg_dropout: float = 0.1


@dataclass
class GlobalConfig:
    frame_size: int = 32
    frames: int = 16
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerDefaults = field(default_factory=SamplerDefaults)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    workdir: str = "work"

    def to_json(self, path: Path | str) -> None:
        payload = asdict(self)
        payload["denoiser"] = self.denoiser.to_dict()
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path: Path | str) -> "GlobalConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad config file {path}: {exc}") from exc
        cfg = cls()
        for key, sub in (("schedule", ScheduleConfig), ("sampler", SamplerDefaults),
                         ("codec", CodecConfig), ("train", TrainConfig)):
            if key in payload:
                setattr(cfg, key, sub(**payload[key]))
        if "denoiser" in payload:
            cfg.denoiser = DenoiserConfig.from_dict(payload["denoiser"])
        for key in ("frame_size", "frames", "workdir"):
            if key in payload:
                setattr(cfg, key, payload[key])
        return cfg
