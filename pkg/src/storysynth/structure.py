"""Depth-to-feature structure encoder and the per-step guidance gate.

The encoder turns a depth sequence into one feature map per denoiser encoder
level; an adjustable policy decides on which sampling steps those features are
injected (early high-noise steps only, when the fraction is below 1)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .corpus import DepthSequence
from .checkpoints import load_blob, save_blob
from .errors import DependencyError, ParameterError, ShapeError


@dataclass
class GuidancePolicy:
    """Structure guidance stays on for the first ceil(g * steps) sampling steps.

    mode 'clamp' switches features off after that window (the default);
    mode 'rescale' keeps them on every step but multiplies them by g instead.
    """

    guidance_fraction: float = 1.0
    mode: str = "clamp"

    def __post_init__(self):
        if not (0.0 <= self.guidance_fraction <= 1.0):
            raise ParameterError("guidance_fraction must lie in [0, 1]")
        if self.mode not in ("clamp", "rescale"):
            raise ParameterError(f"unknown guidance mode {self.mode!r}")


def guidance_active(step_index: int, total_steps: int, policy: GuidancePolicy) -> bool:
    """True iff structure features are injected on this step (0 = highest noise)."""
    if not (0 <= step_index < total_steps):
        raise ParameterError(f"step_index {step_index} outside [0, {total_steps})")
    if policy.mode == "rescale":
        return policy.guidance_fraction > 0.0
    return step_index < math.ceil(policy.guidance_fraction * total_steps)


class StructureEncoder(nn.Module):
    """Frame-local conv pyramid from pixel-space depth to per-level features.

    Stride-2 stages walk from the depth resolution down to the lowest denoiser
    level; a zero-initialized 1x1 projection taps each level's resolution, so an
    untrained encoder is an exact no-op on the denoiser.
    """

    def __init__(self, pixel_size: int, level_resolutions: list[int], level_channels: list[int],
                 base_channels: int = 16):
        super().__init__()
        if sorted(level_resolutions, reverse=True) != list(level_resolutions):
            raise ParameterError("level_resolutions must be descending")
        self.pixel_size = pixel_size
        self.level_resolutions = list(level_resolutions)
        self.level_channels = list(level_channels)

        stages = []
        taps = {}
        res, ch = pixel_size, base_channels
        stages.append(nn.Sequential(nn.Conv2d(1, ch, 3, padding=1), nn.SiLU()))
        if res in level_resolutions:
            taps[str(res)] = (len(stages) - 1, ch)
        while res > min(level_resolutions):
            res //= 2
            out_ch = min(ch * 2, 128)
            stages.append(nn.Sequential(nn.Conv2d(ch, out_ch, 3, stride=2, padding=1), nn.SiLU()))
            ch = out_ch
            if res in level_resolutions:
                taps[str(res)] = (len(stages) - 1, ch)
        missing = [r for r in level_resolutions if str(r) not in taps]
        if missing:
            raise ShapeError(f"cannot reach level resolutions {missing} from depth size {pixel_size}")
        self.stages = nn.ModuleList(stages)
        self._tap_stage = {r: taps[str(r)][0] for r in map(str, level_resolutions)}
        self.projections = nn.ModuleDict()
        for r, lch in zip(level_resolutions, level_channels):
            proj = nn.Conv2d(taps[str(r)][1], lch, 1)
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
            self.projections[str(r)] = proj

    def forward(self, depth: torch.Tensor) -> list[torch.Tensor]:
        # depth: [N, 1, H, W] with frames folded into the batch dim
        feats = {}
        x = depth
        for i, stage in enumerate(self.stages):
            x = stage(x)
            for r, stage_idx in self._tap_stage.items():
                if stage_idx == i:
                    feats[r] = self.projections[r](x)
        return [feats[str(r)] for r in self.level_resolutions]


def encode_structure(depth: DepthSequence | torch.Tensor, encoder: StructureEncoder) -> list[torch.Tensor]:
    """Multi-scale features for a depth sequence, one [L, ch, res, res] per level."""
    maps = depth.maps if isinstance(depth, DepthSequence) else depth
    x = torch.as_tensor(np.asarray(maps), dtype=torch.float32)
    if x.dim() != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected depth [L, 1, H, W], got {tuple(x.shape)}")
    if x.shape[2] != encoder.pixel_size or x.shape[3] != encoder.pixel_size:
        raise ShapeError(f"depth {tuple(x.shape[2:])} does not match encoder size {encoder.pixel_size}")
    with torch.no_grad():
        return encoder(x)


def scale_features(feats: list[torch.Tensor] | None, factor: float) -> list[torch.Tensor] | None:
    if feats is None or factor == 1.0:
        return feats
    return [f * factor for f in feats]


def save_structure_encoder(encoder: StructureEncoder, path: Path | str, meta: dict | None = None) -> None:
    header = {
        "pixel_size": encoder.pixel_size,
        "level_resolutions": encoder.level_resolutions,
        "level_channels": encoder.level_channels,
        **(meta or {}),
    }
    save_blob(path, header, encoder.state_dict())


def load_structure_encoder(path: Path | str) -> tuple[StructureEncoder, dict]:
    header, state = load_blob(path)
    encoder = StructureEncoder(
        pixel_size=header["pixel_size"],
        level_resolutions=header["level_resolutions"],
        level_channels=header["level_channels"],
    )
    encoder.load_state_dict(state)
    encoder.eval()
    return encoder, header


def train_structure_encoder(
    latents: torch.Tensor,
    depths: torch.Tensor,
    token_seqs: list,
    text_encoder,
    denoiser,
    schedule,
    steps: int = 3000,
    batch_size: int = 4,
    train_frames: int = 8,
    lr: float = 1e-3,
    cfg_dropout: float = 0.1,
    seed: int = 0,
    encoder: StructureEncoder | None = None,
    log_every: int = 0,
) -> tuple[StructureEncoder, list[float]]:
    """Stage-2 training: fit the structure encoder with the base model frozen.

    latents: [N, L, c, h, w] precomputed corpus latents; depths: [N, L, 1, H, W].
    """
    from .denoiser import denoiser_level_specs, training_step  # local import: avoids module cycle

    if denoiser is None or text_encoder is None:
        raise DependencyError("a trained base model (denoiser + text encoder) is required")
    if latents.shape[0] < 1:
        raise ParameterError("empty corpus")
    torch.manual_seed(seed)
    if encoder is None:
        resolutions, channels = denoiser_level_specs(denoiser.config, int(latents.shape[-1]))
        encoder = StructureEncoder(int(depths.shape[-1]), resolutions, channels)

    denoiser.eval()
    text_encoder.eval()
    for p in denoiser.parameters():
        p.requires_grad_(False)
    for p in text_encoder.parameters():
        p.requires_grad_(False)

    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for step in range(steps):
        loss = training_step(
            denoiser, text_encoder, latents, token_seqs, schedule, gen,
            batch_size=batch_size, train_frames=train_frames, cfg_dropout=cfg_dropout,
            depths=depths, structure_encoder=encoder,
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            print(f"[structure] step {step + 1}/{steps} loss {np.mean(history[-log_every:]):.4f}")

    for p in denoiser.parameters():
        p.requires_grad_(True)
    for p in text_encoder.parameters():
        p.requires_grad_(True)
    encoder.eval()
    return encoder, history
