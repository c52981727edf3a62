"""Model bundle: every artifact needed for sampling (codec, denoiser, text
encoder, optional structure encoder, schedule), with directory save/load."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import CodecParams, decode_latents, identity_codec, load_codec, save_codec, LatentVideo
from .config import GlobalConfig
from .corpus import VideoClip
from .denoiser import DenoiserNet, load_denoiser, save_denoiser
from .diffusion import NoiseSchedule, make_schedule
from .errors import DependencyError
from .structure import StructureEncoder, load_structure_encoder, save_structure_encoder
from .text import TextEncoder, Vocabulary
from .checkpoints import load_blob, save_blob

CODEC_FILE = "codec.ckpt"
BASE_FILE = "base.ckpt"
TEXT_FILE = "text_encoder.ckpt"
STRUCT_FILE = "structure.ckpt"
VOCAB_FILE = "vocab.json"
CONFIG_FILE = "config.json"


@dataclass
class ModelBundle:
    config: GlobalConfig
    vocab: Vocabulary
    codec: CodecParams
    schedule: NoiseSchedule
    denoiser: DenoiserNet | None = None
    text_encoder: TextEncoder | None = None
    structure_encoder: StructureEncoder | None = None

    @property
    def frame_size(self) -> int:
        return self.config.frame_size

    def latent_shape(self) -> tuple[int, int, int]:
        size = self.config.frame_size // self.codec.factor
        return (self.codec.channels, size, size)

    def decode(self, z: torch.Tensor) -> VideoClip:
        return decode_latents(LatentVideo(z=z, codec_id=self.codec.codec_id), self.codec)

    def save(self, workdir: Path | str) -> None:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        self.config.to_json(workdir / CONFIG_FILE)
        self.vocab.save(workdir / VOCAB_FILE)
        save_codec(self.codec, workdir / CODEC_FILE)
        if self.denoiser is not None:
            save_denoiser(self.denoiser, workdir / BASE_FILE, codec_id=self.codec.codec_id)
        if self.text_encoder is not None:
            save_blob(workdir / TEXT_FILE, {"dim": self.text_encoder.dim},
                      self.text_encoder.state_dict())
        if self.structure_encoder is not None:
            save_structure_encoder(self.structure_encoder, workdir / STRUCT_FILE)


def fresh_bundle(config: GlobalConfig | None = None) -> ModelBundle:
    config = config or GlobalConfig()
    codec = identity_codec() if config.codec.mode == "identity" else None
    if codec is None:
        raise DependencyError("conv_ae codec must be trained first (use train-codec)")
    return ModelBundle(
        config=config,
        vocab=Vocabulary.default(),
        codec=codec,
        schedule=make_schedule(config.schedule.T, config.schedule.beta_min, config.schedule.beta_max),
    )


def load_bundle(workdir: Path | str, require: tuple = ("codec", "base")) -> ModelBundle:
    workdir = Path(workdir)
    config = GlobalConfig.from_json(workdir / CONFIG_FILE) if (workdir / CONFIG_FILE).exists() else GlobalConfig()
    vocab_path = workdir / VOCAB_FILE
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else Vocabulary.default()
    schedule = make_schedule(config.schedule.T, config.schedule.beta_min, config.schedule.beta_max)

    codec_path = workdir / CODEC_FILE
    if codec_path.exists():
        codec = load_codec(codec_path)
    elif config.codec.mode == "identity":
        codec = identity_codec()
    elif "codec" in require:
        raise DependencyError(f"missing codec checkpoint {codec_path}")
    else:
        codec = identity_codec()

    bundle = ModelBundle(config=config, vocab=vocab, codec=codec, schedule=schedule)

    base_path = workdir / BASE_FILE
    if base_path.exists():
        denoiser, header = load_denoiser(base_path)
        if header.get("codec_id") and header["codec_id"] != codec.codec_id:
            raise DependencyError(
                f"base model was trained on codec {header['codec_id']}, found {codec.codec_id}")
        bundle.denoiser = denoiser
    elif "base" in require:
        raise DependencyError(f"missing base checkpoint {base_path}")

    text_path = workdir / TEXT_FILE
    if text_path.exists():
        header, state = load_blob(text_path)
        text_encoder = TextEncoder(vocab, dim=header["dim"])
        text_encoder.load_state_dict(state)
        text_encoder.eval()
        bundle.text_encoder = text_encoder
    elif "base" in require:
        raise DependencyError(f"missing text encoder checkpoint {text_path}")

    struct_path = workdir / STRUCT_FILE
    if struct_path.exists():
        bundle.structure_encoder, _ = load_structure_encoder(struct_path)
    elif "structure" in require:
        raise DependencyError(f"missing structure encoder checkpoint {struct_path}")
    return bundle
