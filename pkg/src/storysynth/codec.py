"""Frame-wise latent codec: identity passthrough for tests, a small trained
convolutional autoencoder for the real pipeline. Frozen during all diffusion
training."""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .corpus import VideoClip
from .checkpoints import load_blob, save_blob
from .errors import ParameterError, ShapeError

CODEC_VERSION = 1


class ConvAutoencoder(nn.Module):
    """3x32x32 -> 4x8x8 and back; sprites compress easily at this budget."""

    def __init__(self, latent_channels: int = 4, hidden: int = 64):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(3, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden * 2, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, hidden * 2, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(hidden * 2, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


@dataclass
class CodecParams:
    mode: str = "identity"  # identity | conv_ae
    factor: int = 1
    channels: int = 3
    latent_scale: float = 1.0
    state: dict | None = None
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode == "identity":
            if self.factor != 1 or self.channels != 3:
                raise ParameterError("identity codec requires factor=1, channels=3")
        elif self.mode != "conv_ae":
            raise ParameterError(f"unknown codec mode {self.mode!r}")

    @property
    def codec_id(self) -> str:
        if self.mode == "identity":
            return "identity"
        buf = io.BytesIO()
        torch.save({k: v for k, v in sorted(self.state.items())}, buf)
        return "conv_ae-" + hashlib.sha1(buf.getvalue()).hexdigest()[:12]

    def module(self) -> ConvAutoencoder:
        net = ConvAutoencoder(latent_channels=self.channels)
        net.load_state_dict(self.state)
        net.eval()
        return net


@dataclass
class LatentVideo:
    z: torch.Tensor  # [L, c, h, w]
    codec_id: str


def identity_codec() -> CodecParams:
    return CodecParams()


def _frames_tensor(clip: VideoClip | np.ndarray | torch.Tensor) -> torch.Tensor:
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    return torch.as_tensor(np.asarray(frames), dtype=torch.float32)


def encode_frames(clip: VideoClip | np.ndarray | torch.Tensor, codec: CodecParams) -> LatentVideo:
    """Encode a clip frame-by-frame into the diffusion latent space."""
    x = _frames_tensor(clip)
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected [L, 3, H, W], got {tuple(x.shape)}")
    if x.shape[2] % codec.factor or x.shape[3] % codec.factor:
        raise ShapeError(f"frame dims {tuple(x.shape[2:])} not divisible by factor {codec.factor}")
    if codec.mode == "identity":
        return LatentVideo(z=x.clone(), codec_id=codec.codec_id)
    net = codec.module()
    with torch.no_grad():
        z = net.encoder(x) / codec.latent_scale
    return LatentVideo(z=z, codec_id=codec.codec_id)


def decode_latents(latents: LatentVideo, codec: CodecParams) -> VideoClip:
    """Decode latents back to a pixel clip clamped to [0, 1]."""
    if latents.codec_id != codec.codec_id:
        raise ParameterError(f"codec mismatch: latents from {latents.codec_id}, decoding with {codec.codec_id}")
    if codec.mode == "identity":
        return VideoClip(frames=latents.z.clamp(0.0, 1.0).numpy())
    net = codec.module()
    with torch.no_grad():
        x = net.decoder(latents.z * codec.latent_scale)
    return VideoClip(frames=x.clamp(0.0, 1.0).numpy())


def train_autoencoder(
    frames: np.ndarray,
    steps: int = 2000,
    batch_size: int = 32,
    lr: float = 2e-3,
    latent_channels: int = 4,
    seed: int = 0,
) -> CodecParams:
    """Fit the conv autoencoder on corpus frames by MSE; deterministic per seed.

    frames: [N, 3, H, W] pooled over all corpus clips.
    """
    data = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    if data.dim() != 4 or data.shape[0] < 1:
        raise ParameterError("need a nonempty [N, 3, H, W] frame array")
    torch.manual_seed(seed)
    net = ConvAutoencoder(latent_channels=latent_channels)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=lr * 0.02)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for _ in range(steps):
        idx = torch.randint(0, data.shape[0], (min(batch_size, data.shape[0]),), generator=gen)
        batch = data[idx]
        loss = ((net(batch) - batch) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))

    net.eval()
    with torch.no_grad():
        sample = data[:: max(1, data.shape[0] // 512)]
        recon_mse = float(((net(sample) - sample) ** 2).mean())
        scale = float(net.encoder(sample).std())
    return CodecParams(
        mode="conv_ae",
        factor=4,
        channels=latent_channels,
        latent_scale=max(scale, 1e-6),
        state={k: v.detach().clone() for k, v in net.state_dict().items()},
        stats={"final_loss": history[-1], "recon_mse": recon_mse, "history": history},
    )


def save_codec(codec: CodecParams, path: Path | str) -> None:
    header = {
        "mode": codec.mode,
        "f": codec.factor,
        "c": codec.channels,
        "latent_scale": codec.latent_scale,
        "version": CODEC_VERSION,
    }
    save_blob(path, header, codec.state)


def load_codec(path: Path | str) -> CodecParams:
    header, state = load_blob(path)
    return CodecParams(
        mode=header["mode"],
        factor=header["f"],
        channels=header["c"],
        latent_scale=header["latent_scale"],
        state=state,
    )
