"""Diffusion math: noise schedule, forward marginal, training objective, and
samplers with classifier-free guidance and step-gated structure injection.

Timesteps are 1-based everywhere (t in [1, T]); array storage is 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ParameterError, ShapeError
from .structure import GuidancePolicy, guidance_active


@dataclass
class NoiseSchedule:
    """Linear beta schedule with cached cumulative products."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def sqrt_alpha_bar(self, t) -> torch.Tensor:
        return torch.as_tensor(np.sqrt(self.alpha_bar[np.asarray(t) - 1]), dtype=torch.float32)

    def sqrt_one_minus_alpha_bar(self, t) -> torch.Tensor:
        return torch.as_tensor(np.sqrt(1.0 - self.alpha_bar[np.asarray(t) - 1]), dtype=torch.float32)


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ParameterError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _broadcast_t(coeff: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # coeff is scalar or [B]; append singleton dims to match `like`.
    if coeff.dim() == 0:
        return coeff
    return coeff.reshape(coeff.shape[0], *([1] * (like.dim() - 1)))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward marginal: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ParameterError(f"timestep {t} outside [1, {schedule.T}]")
    a = _broadcast_t(schedule.sqrt_alpha_bar(t).to(z0.dtype), z0)
    b = _broadcast_t(schedule.sqrt_one_minus_alpha_bar(t).to(z0.dtype), z0)
    return a * z0 + b * eps


def training_loss(
    eps_model: Callable[[torch.Tensor, torch.Tensor, list], torch.Tensor],
    z0: torch.Tensor,
    conds: list,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Denoising objective: mean over batch and elements of ||eps - eps_hat||^2.

    Per batch item, t ~ Uniform[1, T] and eps ~ N(0, I); the model receives the
    sampled timesteps so conditioning embeddings can depend on t.
    z0: [B, ...]; conds: one conditioning record per item, passed through.
    """
    if z0.shape[0] < 1:
        raise ParameterError("empty batch")
    B = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = q_sample(z0, t.numpy(), eps, schedule)
    eps_hat = eps_model(z_t, t, conds)
    if eps_hat.shape != eps.shape:
        raise ShapeError(f"model output {tuple(eps_hat.shape)} != noise shape {tuple(eps.shape)}")
    return ((eps_hat - eps) ** 2).mean()


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance: uncond + w * (cond - uncond); w=0/1 exact."""
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"shapes differ: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    if w == 0.0:
        return eps_uncond
    if w == 1.0:
        return eps_cond
    return eps_uncond + w * (eps_cond - eps_uncond)


@dataclass
class SamplerConfig:
    kind: str = "ddim"  # ddim | ddpm
    steps: int = 50
    guidance_scale: float = 9.0
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ddim", "ddpm"):
            raise ParameterError(f"unknown sampler kind {self.kind!r}")
        if not (0.0 <= self.eta <= 1.0):
            raise ParameterError("eta must lie in [0, 1]")
        if self.guidance_scale < 0.0:
            raise ParameterError("guidance_scale must be >= 0")


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced 1-based timesteps over [1, T], descending (highest noise first)."""
    if steps > T:
        raise ParameterError(f"steps {steps} > T {T}")
    if steps == 1:
        return np.array([T], dtype=np.int64)
    ts = np.round(np.linspace(1, T, steps)).astype(np.int64)
    return ts[::-1].copy()


def ddim_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One DDIM/ancestral update from timestep t to t_prev (t_prev=0 means clean)."""
    ab_t = float(schedule.alpha_bar[t - 1])
    ab_prev = 1.0 if t_prev == 0 else float(schedule.alpha_bar[t_prev - 1])
    x0_pred = (z_t - float(np.sqrt(1.0 - ab_t)) * eps_hat) / float(np.sqrt(ab_t))
    sigma = 0.0
    if eta > 0.0 and t_prev > 0:
        sigma = eta * float(np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev))
    dir_coeff = float(np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)))
    out = float(np.sqrt(ab_prev)) * x0_pred + dir_coeff * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ParameterError("eta > 0 requires a noise tensor")
        out = out + sigma * noise
    return out


def sample(
    denoise_fn: Callable[[torch.Tensor, int, torch.Tensor, object], torch.Tensor],
    cond,
    structure_feats,
    policy: GuidancePolicy,
    latent_shape: tuple,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Run the reverse chain from pure noise to a latent video.

    denoise_fn(z_t, t, tokens, feats) predicts eps; `cond.tokens_at(t)` supplies
    (conditional, unconditional) token states; structure features are passed only
    on steps where the guidance policy is active. Deterministic given the seed
    when eta = 0.
    """
    if sampler.kind == "ddpm":
        steps = sampler.steps if sampler.steps else schedule.T
        eta = 1.0
    else:
        steps, eta = sampler.steps, sampler.eta
    ts = sampling_timesteps(schedule.T, steps)
    gen = torch.Generator().manual_seed(sampler.seed)
    z = torch.randn(latent_shape, generator=gen)
    w = sampler.guidance_scale
    for i, t in enumerate(ts):
        t = int(t)
        feats = structure_feats if (structure_feats is not None and guidance_active(i, len(ts), policy)) else None
        tokens_c, tokens_u = cond.tokens_at(t)
        eps_c = denoise_fn(z, t, tokens_c, feats)
        if w == 1.0:
            eps_hat = eps_c
        else:
            eps_u = denoise_fn(z, t, tokens_u, feats)
            eps_hat = cfg_combine(eps_u, eps_c, w)
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        noise = torch.randn(latent_shape, generator=gen) if (eta > 0.0 and t_prev > 0) else None
        z = ddim_step(z, eps_hat, t, t_prev, schedule, eta=eta, noise=noise)
    return z
