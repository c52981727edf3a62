"""Concept personalization: per-timestep token tables, low-rank attention
deltas, pseudo-video construction from concept images, and the baseline
trainers (plain inversion, full finetune, k/v finetune) used for comparison."""

from __future__ import annotations

import copy
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .codec import CodecParams, encode_frames
from .corpus import (DepthSequence, VideoClip, classify_background, load_clip, load_depth,
                     sprite_mask_of_frame)
from .checkpoints import load_blob, save_blob
from .denoiser import DenoiserNet, attention_projection_names
from .diffusion import NoiseSchedule, SamplerConfig, sample, training_loss
from .errors import DependencyError, NotFoundError, ParameterError, ShapeError
from .structure import GuidancePolicy, StructureEncoder, scale_features
from .text import (PSEUDO_TOKEN, PromptConditioning, TextEncoder, TimeInvTable, TokenSequence,
                   empty_prompt, tokenize)

MODES = ("timeinv_lora", "textual_inversion", "full_finetune", "kv_finetune")
MODE_LEARNING_RATES = {
    "timeinv_lora": 1e-4,
    "textual_inversion": 1e-4,
    "full_finetune": 1e-5,
    "kv_finetune": 1e-5,
}


@dataclass
class ConceptDataset:
    """Concept images plus the category word used for warm starts and
    regularization retrieval."""

    images: list[np.ndarray]  # each [3, H, W] in [0, 1]
    pseudo_word: str = PSEUDO_TOKEN
    category_word: str = "circle"
    regularization_clips: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not (1 <= len(self.images) <= 10):
            raise ParameterError("concept needs between 1 and 10 images")


# ---------------------------------------------------------------------------
# Low-rank modulation
# ---------------------------------------------------------------------------

def _key(name: str) -> str:
    return name.replace(".", "|")


class LowRankDeltaSet(nn.Module):
    """Rank-r additive factors for named linear projections: W x + scale * B(A(x)).

    B starts at zero, so a fresh delta set leaves the base model untouched.
    """

    def __init__(self, model: DenoiserNet, target_names: list[str], rank: int = 4, scale: float = 1.0):
        super().__init__()
        self.target_names = list(target_names)
        self.rank = rank
        self.scale = scale
        self.down = nn.ModuleDict()
        self.up = nn.ModuleDict()
        for name in self.target_names:
            try:
                linear = model.get_submodule(name)
            except AttributeError as exc:
                raise ParameterError(f"unknown projection layer {name!r}") from exc
            if not isinstance(linear, nn.Linear):
                raise ParameterError(f"{name!r} is not a linear projection")
            self.down[_key(name)] = nn.Linear(linear.in_features, rank, bias=False)
            up = nn.Linear(rank, linear.out_features, bias=False)
            nn.init.zeros_(up.weight)
            self.up[_key(name)] = up

    def delta(self, name: str, x: torch.Tensor) -> torch.Tensor:
        return self.scale * self.up[_key(name)](self.down[_key(name)](x))

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@contextmanager
def apply_lowrank(model: DenoiserNet, deltas: LowRankDeltaSet):
    """Forward-hook context: targeted projections compute W x + scale * B(A(x))
    while active; base weights are untouched."""
    handles = []

    def make_hook(name):
        def hook(module, inputs, output):
            return output + deltas.delta(name, inputs[0])
        return hook

    try:
        for name in deltas.target_names:
            try:
                linear = model.get_submodule(name)
            except AttributeError as exc:
                raise ParameterError(f"unknown projection layer {name!r}") from exc
            handles.append(linear.register_forward_hook(make_hook(name)))
        yield model
    finally:
        for h in handles:
            h.remove()


# ---------------------------------------------------------------------------
# Pseudo-videos and concept data
# ---------------------------------------------------------------------------

def build_pseudo_video(image: np.ndarray, length: int, size: int | None = None) -> tuple[VideoClip, DepthSequence]:
    """Repeat a concept image into a static L-frame clip with its mask as depth."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected image [3, H, W], got {tuple(image.shape)}")
    if size is not None and image.shape[1:] != (size, size):
        raise ShapeError(f"image {tuple(image.shape[1:])} does not match model resolution {size}")
    if length < 1:
        raise ParameterError("length must be >= 1")
    mask = sprite_mask_of_frame(image.astype(np.float64))
    frames = np.repeat(image[None], length, axis=0)
    depth = np.repeat(mask.astype(np.float32)[None, None], length, axis=0)
    return VideoClip(frames=frames), DepthSequence(maps=depth)


def _augment_image(image: np.ndarray, gen: torch.Generator, max_shift: int = 3) -> np.ndarray:
    out = image
    if int(torch.randint(0, 2, (), generator=gen)):
        out = out[:, :, ::-1]
    dx = int(torch.randint(-max_shift, max_shift + 1, (), generator=gen))
    dy = int(torch.randint(-max_shift, max_shift + 1, (), generator=gen))
    return np.roll(out, (dy, dx), axis=(1, 2)).copy()


def concept_prompt(image: np.ndarray, pseudo_word: str) -> str:
    background, _ = classify_background(np.asarray(image, dtype=np.float64))
    return f"a {pseudo_word} stays still on a {background} background"


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class PersonalizationConfig:
    steps: int = 1000
    lr: float | None = None  # default per mode
    rank: int = 4
    scale: float = 1.0
    train_frames: int = 8
    augment: bool = True
    reg_mix: float = 0.5


@dataclass
class PersonalizationArtifacts:
    mode: str
    pseudo_word: str
    category_word: str
    timeinv: TimeInvTable | None = None
    deltas_state: dict | None = None
    deltas_targets: list[str] | None = None
    rank: int = 4
    scale: float = 1.0
    static_pseudo: torch.Tensor | None = None
    finetuned_state: dict | None = None
    stats: dict = field(default_factory=dict)

    def deltas_for(self, model: DenoiserNet) -> LowRankDeltaSet | None:
        if self.deltas_state is None:
            return None
        deltas = LowRankDeltaSet(model, self.deltas_targets, rank=self.rank, scale=self.scale)
        deltas.load_state_dict(self.deltas_state)
        return deltas

    def denoiser_for(self, base: DenoiserNet) -> DenoiserNet:
        if self.finetuned_state is None:
            return base
        model = DenoiserNet(base.config)
        model.load_state_dict(self.finetuned_state)
        model.eval()
        return model


def _encode_structure_batch(encoder: StructureEncoder, depth: torch.Tensor) -> list[torch.Tensor]:
    # depth: [B, L, 1, H, W] -> per-level [B, L, ch, r, r]
    B, L = depth.shape[0], depth.shape[1]
    feats = encoder(depth.reshape(B * L, *depth.shape[2:]))
    return [f.reshape(B, L, *f.shape[1:]) for f in feats]


def train_personalization(
    bundle,
    concept: ConceptDataset,
    mode: str,
    config: PersonalizationConfig,
    seed: int,
    corpus_dir: Path | str | None = None,
    log_every: int = 0,
) -> PersonalizationArtifacts:
    """Optimize the mode's trainable set on concept pseudo-videos mixed with
    regularization clips (probability reg_mix each per step)."""
    if mode not in MODES:
        raise ParameterError(f"unknown personalization mode {mode!r}")
    if bundle.denoiser is None or bundle.text_encoder is None:
        raise DependencyError("personalization requires a trained base model")
    if bundle.structure_encoder is None:
        raise DependencyError("personalization requires a trained structure encoder")

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    text_encoder: TextEncoder = bundle.text_encoder
    vocab = text_encoder.vocab
    schedule: NoiseSchedule = bundle.schedule
    codec: CodecParams = bundle.codec
    struct = bundle.structure_encoder
    size = bundle.frame_size

    denoiser = bundle.denoiser
    if mode in ("full_finetune", "kv_finetune"):
        denoiser = copy.deepcopy(bundle.denoiser)
    denoiser.train()
    for p in denoiser.parameters():
        p.requires_grad_(False)
    for p in text_encoder.parameters():
        p.requires_grad_(False)
    for p in struct.parameters():
        p.requires_grad_(False)

    category_seq = tokenize(concept.category_word, vocab)
    category_emb = text_encoder.token_embedding.weight[category_seq.ids[0]].detach().clone()

    timeinv = None
    deltas = None
    static_pseudo = None
    if mode == "timeinv_lora":
        V = nn.Parameter(category_emb[None].repeat(schedule.T, 1).clone())
        targets = attention_projection_names(denoiser, kinds=("sattn", "cross"), projs=("q", "k", "v"))
        deltas = LowRankDeltaSet(denoiser, targets, rank=config.rank, scale=config.scale)
        trainable = [V] + list(deltas.parameters())
    elif mode == "textual_inversion":
        static_pseudo = nn.Parameter(category_emb.clone())
        trainable = [static_pseudo]
    elif mode == "full_finetune":
        static_pseudo = nn.Parameter(category_emb.clone())
        for p in denoiser.parameters():
            p.requires_grad_(True)
        trainable = [static_pseudo] + list(denoiser.parameters())
    else:  # kv_finetune
        static_pseudo = nn.Parameter(category_emb.clone())
        kv_names = attention_projection_names(denoiser, kinds=("cross",), projs=("k", "v"))
        kv_params = []
        for name in kv_names:
            linear = denoiser.get_submodule(name)
            linear.weight.requires_grad_(True)
            kv_params.append(linear.weight)
        trainable = [static_pseudo] + kv_params

    lr = config.lr if config.lr is not None else MODE_LEARNING_RATES[mode]
    opt = torch.optim.Adam(trainable, lr=lr)

    # Pre-encode training items once; the codec and structure encoder are frozen.
    concept_items = []
    for image in concept.images:
        prompt = concept_prompt(image, concept.pseudo_word)
        concept_items.append((np.asarray(image, dtype=np.float32), tokenize(prompt, vocab)))
    reg_items = []
    if concept.regularization_clips:
        if corpus_dir is None:
            raise DependencyError("regularization clips listed but no corpus_dir given")
        for rec in concept.regularization_clips:
            clip = load_clip(corpus_dir, rec["clip_id"] if isinstance(rec, dict) else rec,
                             caption=rec.get("caption", "") if isinstance(rec, dict) else "")
            depth = load_depth(corpus_dir, clip.clip_id)
            z = encode_frames(clip, codec).z
            d = torch.as_tensor(depth.maps, dtype=torch.float32)
            seq = tokenize(clip.caption, vocab) if clip.caption else empty_prompt(vocab)
            reg_items.append((z, d, seq))

    Lc = config.train_frames
    history = []
    concept_draws = 0
    reg_draws = 0
    for step in range(config.steps):
        use_concept = (not reg_items) or float(torch.rand((), generator=gen)) < config.reg_mix
        if use_concept:
            concept_draws += 1
            image, seq = concept_items[int(torch.randint(0, len(concept_items), (), generator=gen))]
            if config.augment:
                image = _augment_image(image, gen)
            clip, depth = build_pseudo_video(image, Lc, size=size)
            z0 = encode_frames(clip, codec).z[None]
            d = torch.as_tensor(depth.maps, dtype=torch.float32)[None]
        else:
            reg_draws += 1
            z, d_full, seq = reg_items[int(torch.randint(0, len(reg_items), (), generator=gen))]
            start = int(torch.randint(0, z.shape[0] - Lc + 1, (), generator=gen))
            z0 = z[start:start + Lc][None]
            d = d_full[start:start + Lc][None]
        feats = _encode_structure_batch(struct, d)

        def eps_model(z_t, t, conds):
            emb = text_encoder.embed(conds[0], int(t[0]), timeinv=timeinv, static_pseudo=static_pseudo)
            tokens = text_encoder(emb)[None]
            if deltas is not None:
                with apply_lowrank(denoiser, deltas):
                    return denoiser(z_t, t, tokens, feats)
            return denoiser(z_t, t, tokens, feats)

        loss = training_loss(eps_model, z0, [seq], schedule, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            print(f"[{mode}] step {step + 1}/{config.steps} loss {np.mean(history[-log_every:]):.4f}")

    denoiser.eval()
    artifacts = PersonalizationArtifacts(
        mode=mode,
        pseudo_word=concept.pseudo_word,
        category_word=concept.category_word,
        rank=config.rank,
        scale=config.scale,
        stats={"history": history, "concept_draws": concept_draws, "reg_draws": reg_draws,
               "steps": config.steps, "lr": lr, "seed": seed},
    )
    if mode == "timeinv_lora":
        artifacts.timeinv = TimeInvTable(V=V.detach().clone(), token_name=concept.pseudo_word)
        artifacts.deltas_state = {k: v.detach().clone() for k, v in deltas.state_dict().items()}
        artifacts.deltas_targets = deltas.target_names
    else:
        artifacts.static_pseudo = static_pseudo.detach().clone()
    if mode in ("full_finetune", "kv_finetune"):
        artifacts.finetuned_state = {k: v.detach().clone() for k, v in denoiser.state_dict().items()}
    return artifacts


# ---------------------------------------------------------------------------
# Rerendering
# ---------------------------------------------------------------------------

def rerender_character(
    prompt: str,
    bundle,
    artifacts: PersonalizationArtifacts | None,
    motion_depth: DepthSequence,
    policy: GuidancePolicy,
    sampler: SamplerConfig,
) -> VideoClip:
    """Sample a clip for a concept prompt under retrieved motion structure."""
    if artifacts is not None and artifacts.pseudo_word not in prompt.split():
        raise ParameterError(f"prompt must mention the pseudo word {artifacts.pseudo_word!r}")
    vocab = bundle.text_encoder.vocab
    seq = tokenize(prompt, vocab)
    if artifacts is not None and not seq.has_pseudo:
        raise ParameterError("prompt does not tokenize to a pseudo-token")

    denoiser = bundle.denoiser if artifacts is None else artifacts.denoiser_for(bundle.denoiser)
    deltas = artifacts.deltas_for(denoiser) if artifacts is not None else None
    cond = PromptConditioning(
        encoder=bundle.text_encoder,
        cond_seq=seq,
        uncond_seq=empty_prompt(vocab),
        timeinv=artifacts.timeinv if artifacts is not None else None,
        static_pseudo=artifacts.static_pseudo if artifacts is not None else None,
    )
    frames = motion_depth.length
    feats = None
    if bundle.structure_encoder is not None and policy.guidance_fraction > 0.0:
        feats = _encode_structure_batch(bundle.structure_encoder,
                                        torch.as_tensor(motion_depth.maps, dtype=torch.float32)[None])
        if policy.mode == "rescale":
            feats = scale_features(feats, policy.guidance_fraction)

    def denoise_fn(z, t, tokens, step_feats):
        with torch.no_grad():
            return denoiser(z, torch.full((z.shape[0],), t, dtype=torch.long), tokens[None], step_feats)

    shape = (1, frames, *bundle.latent_shape())
    if deltas is not None:
        with apply_lowrank(denoiser, deltas):
            z = sample(denoise_fn, cond, feats, policy, shape, sampler, bundle.schedule)
    else:
        z = sample(denoise_fn, cond, feats, policy, shape, sampler, bundle.schedule)
    return bundle.decode(z[0])


# ---------------------------------------------------------------------------
# Concept bundle I/O
# ---------------------------------------------------------------------------

def save_concept_dir(concept: ConceptDataset, path: Path | str) -> None:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    for i, image in enumerate(concept.images):
        rgb = np.round(np.asarray(image).transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(path / "images" / f"concept_{i:02d}.png")
    (path / "concept.json").write_text(json.dumps({
        "pseudo_word": concept.pseudo_word,
        "category_word": concept.category_word,
        "regularization_clips": concept.regularization_clips,
    }, sort_keys=True))


def load_concept_dir(path: Path | str) -> ConceptDataset:
    path = Path(path)
    meta_path = path / "concept.json"
    if not meta_path.exists():
        raise NotFoundError(f"no concept.json under {path}")
    meta = json.loads(meta_path.read_text())
    images = []
    for p in sorted((path / "images").glob("concept_*.png")):
        images.append(np.asarray(Image.open(p), dtype=np.float32).transpose(2, 0, 1) / 255.0)
    if not images:
        raise NotFoundError(f"no concept images under {path / 'images'}")
    return ConceptDataset(images=images, pseudo_word=meta["pseudo_word"],
                          category_word=meta["category_word"],
                          regularization_clips=meta.get("regularization_clips", []))


def save_artifacts(artifacts: PersonalizationArtifacts, path: Path | str) -> None:
    header = {
        "mode": artifacts.mode,
        "pseudo_word": artifacts.pseudo_word,
        "category_word": artifacts.category_word,
        "rank": artifacts.rank,
        "scale": artifacts.scale,
        "deltas_targets": artifacts.deltas_targets,
        "stats": {k: v for k, v in artifacts.stats.items() if k != "history"},
    }
    state = {}
    if artifacts.timeinv is not None:
        state["timeinv"] = artifacts.timeinv.V
    if artifacts.deltas_state is not None:
        state.update({f"deltas.{k}": v for k, v in artifacts.deltas_state.items()})
    if artifacts.static_pseudo is not None:
        state["static_pseudo"] = artifacts.static_pseudo
    if artifacts.finetuned_state is not None:
        state.update({f"finetuned.{k}": v for k, v in artifacts.finetuned_state.items()})
    save_blob(path, header, state)


def load_artifacts(path: Path | str) -> PersonalizationArtifacts:
    header, state = load_blob(path)
    artifacts = PersonalizationArtifacts(
        mode=header["mode"],
        pseudo_word=header["pseudo_word"],
        category_word=header["category_word"],
        rank=header["rank"],
        scale=header["scale"],
        deltas_targets=header.get("deltas_targets"),
        stats=header.get("stats", {}),
    )
    state = state or {}
    if "timeinv" in state:
        artifacts.timeinv = TimeInvTable(V=state["timeinv"], token_name=artifacts.pseudo_word)
    deltas = {k[len("deltas."):]: v for k, v in state.items() if k.startswith("deltas.")}
    if deltas:
        artifacts.deltas_state = deltas
    if "static_pseudo" in state:
        artifacts.static_pseudo = state["static_pseudo"]
    finetuned = {k[len("finetuned."):]: v for k, v in state.items() if k.startswith("finetuned.")}
    if finetuned:
        artifacts.finetuned_state = finetuned
    return artifacts
