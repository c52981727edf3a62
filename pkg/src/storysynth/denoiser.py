"""3D U-Net noise predictor: per-frame conv/self-attention, text cross-attention,
temporal attention over the frame axis, with injection points for structure
features and addressable q/k/v projections for low-rank deltas."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import load_blob, save_blob
from .diffusion import NoiseSchedule, training_loss
from .errors import ParameterError, ShapeError
from .text import TextEncoder, TokenSequence, Vocabulary, empty_prompt


@dataclass
class DenoiserConfig:
    base_channels: int = 32
    channel_mults: tuple = (1, 2)
    attn_resolutions: tuple | None = None  # None = spatial self-attention everywhere
    token_dim: int = 64
    num_heads: int = 4
    latent_channels: int = 4
    frames: int = 16
    num_res_blocks: int = 1

    def __post_init__(self):
        if self.token_dim % self.num_heads:
            raise ParameterError("token_dim must be divisible by num_heads")
        for mult in self.channel_mults:
            if (self.base_channels * mult) % self.num_heads:
                raise ParameterError("level channels must be divisible by num_heads")
        if self.num_res_blocks != 1:
            raise ParameterError("only one res block per level is supported")

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "attn_resolutions": None if self.attn_resolutions is None else list(self.attn_resolutions),
            "token_dim": self.token_dim,
            "num_heads": self.num_heads,
            "latent_channels": self.latent_channels,
            "frames": self.frames,
            "num_res_blocks": self.num_res_blocks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        if d.get("attn_resolutions") is not None:
            d["attn_resolutions"] = tuple(d["attn_resolutions"])
        return cls(**d)


def denoiser_level_specs(config: DenoiserConfig, latent_size: int) -> tuple[list[int], list[int]]:
    """(resolutions, channels) of the encoder levels for a given latent size."""
    resolutions = [latent_size // (2 ** i) for i in range(len(config.channel_mults))]
    channels = [config.base_channels * m for m in config.channel_mults]
    return resolutions, channels


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class TokenAttention(nn.Module):
    """Multi-head attention over token sequences with separate q/k/v/out linears."""

    def __init__(self, channels: int, context_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(context_dim, channels, bias=False)
        self.v = nn.Linear(context_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        # tokens: [B, N, C], context: [B, M, ctx]
        B, N, C = tokens.shape
        h = self.num_heads
        q = self.q(tokens).reshape(B, N, h, C // h).transpose(1, 2)
        k = self.k(context).reshape(B, -1, h, C // h).transpose(1, 2)
        v = self.v(context).reshape(B, -1, h, C // h).transpose(1, 2)
        attn = F.scaled_dot_product_attention(q, k, v)
        return self.out(attn.transpose(1, 2).reshape(B, N, C))


class SpatialSelfAttention(nn.Module):
    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        self.norm = _group_norm(channels)
        self.attn = TokenAttention(channels, channels, num_heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        tokens = self.norm(x).reshape(n, c, h * w).transpose(1, 2)
        out = self.attn(tokens, tokens)
        return x + out.transpose(1, 2).reshape(n, c, h, w)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, token_dim: int, num_heads: int):
        super().__init__()
        self.norm = _group_norm(channels)
        self.attn = TokenAttention(channels, token_dim, num_heads)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        tokens = self.norm(x).reshape(n, c, h * w).transpose(1, 2)
        out = self.attn(tokens, context)
        return x + out.transpose(1, 2).reshape(n, c, h, w)


class TemporalAttention(nn.Module):
    """Self-attention across the frame axis at each spatial location.

    The output projection starts at zero so an untrained block is an identity
    and the rest of the network remains frame-local."""

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = TokenAttention(channels, channels, num_heads)
        nn.init.zeros_(self.attn.out.weight)
        nn.init.zeros_(self.attn.out.bias)

    def forward(self, x: torch.Tensor, batch: int, frames: int) -> torch.Tensor:
        n, c, h, w = x.shape
        seq = x.reshape(batch, frames, c, h * w).permute(0, 3, 1, 2).reshape(batch * h * w, frames, c)
        pos = sinusoidal_embedding(torch.arange(frames, dtype=x.dtype), c)
        out = self.attn(self.norm(seq) + pos[None], self.norm(seq) + pos[None])
        out = out.reshape(batch, h * w, frames, c).permute(0, 2, 3, 1).reshape(n, c, h, w)
        return x + out


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = _group_norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = _group_norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class LevelBlock(nn.Module):
    """ResBlock -> optional structure injection -> spatial/cross/temporal attention."""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int,
                 token_dim: int, num_heads: int, use_sattn: bool = True):
        super().__init__()
        self.res = ResBlock(in_channels, out_channels, time_dim)
        self.sattn = SpatialSelfAttention(out_channels, num_heads) if use_sattn else None
        self.cross = CrossAttention(out_channels, token_dim, num_heads)
        self.tattn = TemporalAttention(out_channels, num_heads)

    def forward(self, x, temb, tokens, batch, frames, inject=None):
        x = self.res(x, temb)
        if inject is not None:
            x = x + inject
        if self.sattn is not None:
            x = self.sattn(x)
        x = self.cross(x, tokens)
        x = self.tattn(x, batch, frames)
        return x


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DenoiserNet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        bc = config.base_channels
        chans = [bc * m for m in config.channel_mults]
        n_levels = len(chans)
        self.time_dim = 4 * bc
        self.time_mlp = nn.Sequential(
            nn.Linear(self.time_dim, self.time_dim), nn.SiLU(),
            nn.Linear(self.time_dim, self.time_dim),
        )
        self.conv_in = nn.Conv2d(config.latent_channels, bc, 3, padding=1)

        def use_sattn(level):
            return config.attn_resolutions is None or level in config.attn_resolutions

        self.down_levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = bc
        for i, ch in enumerate(chans):
            self.down_levels.append(LevelBlock(prev, ch, self.time_dim, config.token_dim,
                                               config.num_heads, use_sattn(i)))
            if i < n_levels - 1:
                self.downs.append(Downsample(ch))
            prev = ch

        self.middle_block = LevelBlock(chans[-1], chans[-1], self.time_dim,
                                       config.token_dim, config.num_heads, use_sattn(n_levels - 1))
        self.middle_res = ResBlock(chans[-1], chans[-1], self.time_dim)

        self.up_levels = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(n_levels)):
            in_ch = (chans[i + 1] if i < n_levels - 1 else chans[-1]) + chans[i]
            self.up_levels.append(LevelBlock(in_ch, chans[i], self.time_dim, config.token_dim,
                                             config.num_heads, use_sattn(i)))
            if i > 0:
                self.ups.append(Upsample(chans[i]))

        self.out_norm = _group_norm(bc)
        self.out_conv = nn.Conv2d(bc, config.latent_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, z: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor,
                feats: list[torch.Tensor] | None = None) -> torch.Tensor:
        """z: [B, L, c, h, w]; t: [B] 1-based timesteps; tokens: [B, N, d];
        feats: one [B, L, ch_i, r_i, r_i] per encoder level."""
        if z.dim() != 5:
            raise ShapeError(f"expected [B, L, c, h, w], got {tuple(z.shape)}")
        B, L = z.shape[0], z.shape[1]
        x = z.reshape(B * L, *z.shape[2:])
        temb = self.time_mlp(sinusoidal_embedding(t.to(x.dtype), self.time_dim))
        temb = temb.repeat_interleave(L, dim=0)
        tokens_f = tokens.repeat_interleave(L, dim=0)

        x = self.conv_in(x)
        skips = []
        for i, level in enumerate(self.down_levels):
            inject = None
            if feats is not None:
                f = feats[i]
                inject = f.reshape(B * L, *f.shape[2:])
                expected = (level.res.conv2.out_channels, x.shape[2], x.shape[3])
                if tuple(inject.shape[1:]) != expected:
                    raise ShapeError(
                        f"structure features at level {i} have shape {tuple(inject.shape[1:])}, "
                        f"expected {expected}")
            x = level(x, temb, tokens_f, B, L, inject=inject)
            skips.append(x)
            if i < len(self.down_levels) - 1:
                x = self.downs[i](x)

        x = self.middle_block(x, temb, tokens_f, B, L)
        x = self.middle_res(x, temb)

        for j, level in enumerate(self.up_levels):
            x = torch.cat([x, skips[len(skips) - 1 - j]], dim=1)
            x = level(x, temb, tokens_f, B, L)
            if j < len(self.ups):
                x = self.ups[j](x)

        x = self.out_conv(F.silu(self.out_norm(x)))
        return x.reshape(B, L, *x.shape[1:])


def init_denoiser(config: DenoiserConfig, seed: int) -> DenoiserNet:
    """Deterministic initialization; the zero-init output layer makes an
    untrained model predict exactly zero."""
    torch.manual_seed(seed)
    return DenoiserNet(config)


def attention_projection_names(model: DenoiserNet, kinds=("sattn", "cross"), projs=("q", "k", "v")) -> list[str]:
    """Addressable q/k/v projection module names for the given attention kinds."""
    names = []
    for name, module in model.named_modules():
        if not isinstance(module, nn.Linear):
            continue
        parts = name.split(".")
        if len(parts) >= 3 and parts[-1] in projs and parts[-2] == "attn" and parts[-3] in kinds:
            names.append(name)
    return sorted(names)


def denoise(
    z_t: torch.Tensor,
    t: int | torch.Tensor,
    token_embeddings: torch.Tensor,
    structure_feats: list[torch.Tensor] | None,
    model: DenoiserNet,
    deltas=None,
) -> torch.Tensor:
    """Functional single-clip interface: z_t [L, c, h, w] (or batched [B, L, ...]).

    structure_feats, when given, are added elementwise to the matching encoder
    feature maps; deltas (a low-rank set) modulate attention projections for
    the duration of the call."""
    squeeze = z_t.dim() == 4
    if squeeze:
        z_t = z_t[None]
        token_embeddings = token_embeddings[None]
        if structure_feats is not None:
            structure_feats = [f[None] for f in structure_feats]
    if isinstance(t, int):
        t = torch.full((z_t.shape[0],), t, dtype=torch.long)
    if deltas is not None:
        from .personalize import apply_lowrank  # deferred: personalize imports this module

        with apply_lowrank(model, deltas):
            out = model(z_t, t, token_embeddings, structure_feats)
    else:
        out = model(z_t, t, token_embeddings, structure_feats)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def training_step(
    denoiser: DenoiserNet,
    text_encoder: TextEncoder,
    latents: torch.Tensor,
    token_seqs: list[TokenSequence],
    schedule: NoiseSchedule,
    gen: torch.Generator,
    *,
    batch_size: int,
    train_frames: int,
    cfg_dropout: float,
    depths: torch.Tensor | None = None,
    structure_encoder=None,
) -> torch.Tensor:
    """One Eq.-style denoising loss over a random mini-batch of corpus clips."""
    N, L_full = latents.shape[0], latents.shape[1]
    k = min(batch_size, N)
    idx = torch.randint(0, N, (k,), generator=gen)
    max_start = max(L_full - train_frames, 0)
    starts = torch.randint(0, max_start + 1, (k,), generator=gen)
    z0 = torch.stack([latents[i, s:s + train_frames] for i, s in zip(idx.tolist(), starts.tolist())])

    uncond = empty_prompt(text_encoder.vocab)
    conds = []
    for i in idx.tolist():
        drop = float(torch.rand((), generator=gen)) < cfg_dropout
        conds.append(uncond if drop else token_seqs[i])

    feats = None
    if structure_encoder is not None:
        if depths is None:
            raise ParameterError("structure training needs depth maps")
        d = torch.stack([depths[i, s:s + train_frames] for i, s in zip(idx.tolist(), starts.tolist())])
        B, Lc = d.shape[0], d.shape[1]
        level_feats = structure_encoder(d.reshape(B * Lc, *d.shape[2:]))
        feats = [f.reshape(B, Lc, *f.shape[1:]) for f in level_feats]

    def eps_model(z_t, t, cond_seqs):
        emb = torch.stack([text_encoder.embed(seq) for seq in cond_seqs])
        tokens = text_encoder(emb)
        return denoiser(z_t, t, tokens, feats)

    return training_loss(eps_model, z0, conds, schedule, gen)


def train_base(
    latents: torch.Tensor,
    token_seqs: list[TokenSequence],
    vocab: Vocabulary,
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
    batch_size: int = 4,
    train_frames: int = 8,
    lr: float = 2e-4,
    cfg_dropout: float = 0.1,
    checkpoint_dir: Path | str | None = None,
    checkpoint_every: int = 1000,
    log_every: int = 0,
) -> tuple[DenoiserNet, TextEncoder, list[float]]:
    """Stage-1 training of the text-to-video base (denoiser + text encoder).

    latents: [N, L, c, h, w] precomputed frozen-codec latents for the corpus.
    """
    if latents.shape[0] < 1:
        raise ParameterError("empty corpus")
    torch.manual_seed(seed)
    model = DenoiserNet(config)
    text_encoder = TextEncoder(vocab, dim=config.token_dim)
    params = list(model.parameters()) + list(text_encoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    gen = torch.Generator().manual_seed(seed)

    history = []
    for step in range(steps):
        loss = training_step(
            model, text_encoder, latents, token_seqs, schedule, gen,
            batch_size=batch_size, train_frames=train_frames, cfg_dropout=cfg_dropout,
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if checkpoint_dir is not None and (step + 1) % checkpoint_every == 0:
            save_denoiser(model, Path(checkpoint_dir) / f"base_step{step + 1:06d}.ckpt",
                          step=step + 1, seed=seed)
        if log_every and (step + 1) % log_every == 0:
            print(f"[base] step {step + 1}/{steps} loss {np.mean(history[-log_every:]):.4f}")
    model.eval()
    text_encoder.eval()
    return model, text_encoder, history


def save_denoiser(model: DenoiserNet, path: Path | str, *, step: int = 0, seed: int = 0,
                  codec_id: str = "", extra: dict | None = None) -> None:
    header = {"config": model.config.to_dict(), "step": step, "seed": seed, "codec_id": codec_id,
              **(extra or {})}
    save_blob(path, header, model.state_dict())


def load_denoiser(path: Path | str) -> tuple[DenoiserNet, dict]:
    header, state = load_blob(path)
    model = DenoiserNet(DenoiserConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    model.eval()
    return model, header
