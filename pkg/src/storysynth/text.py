"""Tokenization and token embeddings, including the pseudo-token slot and the
per-timestep embedding table used for timestep-variable inversion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .corpus import BACKGROUNDS, COLORS, MOTIONS, SHAPES
from .errors import ParameterError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PSEUDO_TOKEN = "<new1>"
MAX_TOKENS = 16

_GRAMMAR_WORDS = sorted(set(
    ["a", "on", "background", "moves", "stays", "still"]
    + list(SHAPES) + list(COLORS) + list(MOTIONS) + list(BACKGROUNDS)
))


@dataclass
class Vocabulary:
    words: list[str]

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}
        self.pad_id = self.index[PAD_TOKEN]
        self.unk_id = self.index[UNK_TOKEN]
        self.pseudo_id = self.index[PSEUDO_TOKEN]

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(words=[PAD_TOKEN, UNK_TOKEN, PSEUDO_TOKEN] + _GRAMMAR_WORDS)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.words))

    @classmethod
    def load(cls, path: Path | str) -> "Vocabulary":
        return cls(words=json.loads(Path(path).read_text()))


@dataclass
class TokenSequence:
    ids: np.ndarray  # [MAX_TOKENS] int64, padded
    has_pseudo: bool = False
    pseudo_position: int | None = None


def tokenize(prompt: str, vocab: Vocabulary) -> TokenSequence:
    """Whitespace/punctuation tokenization against the fixed vocabulary."""
    if len(prompt) > 128:
        raise ParameterError("prompt longer than 128 characters")
    words = [w.strip(".,!?;:") for w in prompt.lower().split()]
    words = [w for w in words if w]
    if len(words) > MAX_TOKENS:
        raise ParameterError(f"prompt has {len(words)} tokens, max {MAX_TOKENS}")
    ids = np.full(MAX_TOKENS, vocab.pad_id, dtype=np.int64)
    pseudo_position = None
    for i, w in enumerate(words):
        if w == PSEUDO_TOKEN:
            if pseudo_position is not None:
                raise ParameterError("at most one pseudo-token per prompt")
            pseudo_position = i
        ids[i] = vocab.index.get(w, vocab.unk_id)
    return TokenSequence(ids=ids, has_pseudo=pseudo_position is not None, pseudo_position=pseudo_position)


def detokenize(ids: np.ndarray, vocab: Vocabulary) -> str:
    words = [vocab.words[i] for i in ids if i != vocab.pad_id]
    return " ".join(words)


@dataclass
class TimeInvTable:
    """One pseudo-token embedding row per diffusion timestep: V[t-1] for t in [1, T]."""

    V: torch.Tensor  # [T, d]
    token_name: str = PSEUDO_TOKEN

    @property
    def T(self) -> int:
        return self.V.shape[0]

    @property
    def dim(self) -> int:
        return self.V.shape[1]


def embed_tokens(
    seq: TokenSequence,
    t: int,
    static_table: torch.Tensor,
    timeinv: TimeInvTable | None = None,
    static_pseudo: torch.Tensor | None = None,
) -> torch.Tensor:
    """Token embeddings [N, d]; the pseudo slot resolves per timestep.

    Ordinary tokens always use static_table rows. The pseudo position uses
    V[t] when a table is given, otherwise the provided static pseudo row.
    """
    ids = torch.as_tensor(seq.ids, dtype=torch.long)
    emb = static_table[ids]
    if seq.has_pseudo:
        if timeinv is not None:
            if not (1 <= t <= timeinv.T):
                raise ParameterError(f"timestep {t} outside [1, {timeinv.T}]")
            row = timeinv.V[t - 1]
        elif static_pseudo is not None:
            row = static_pseudo
        else:
            raise ParameterError("pseudo-token present but no pseudo embedding source given")
        emb = emb.clone()
        emb[seq.pseudo_position] = row
    return emb


def _sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float32)[:, None]
    freqs = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float32) / dim)
    args = pos * freqs[None]
    out = torch.zeros(n, dim)
    out[:, 0::2] = torch.sin(args)
    out[:, 1::2] = torch.cos(args)
    return out


class TextEncoder(nn.Module):
    """Token embedding table plus a small transformer over the embedded sequence.

    Trained jointly with the base denoiser, frozen afterwards; pseudo-token
    substitution happens at the embedding input, below the frozen layers.
    """

    def __init__(self, vocab: Vocabulary, dim: int = 64, num_layers: int = 2, num_heads: int = 4):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.token_embedding = nn.Embedding(len(vocab), dim)
        self.register_buffer("pos", _sinusoidal_positions(MAX_TOKENS, dim), persistent=False)
        layer = nn.TransformerEncoderLayer(
            d_model=dim, nhead=num_heads, dim_feedforward=2 * dim,
            dropout=0.0, batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=num_layers, enable_nested_tensor=False)

    def embed(self, seq: TokenSequence, t: int = 1,
              timeinv: TimeInvTable | None = None,
              static_pseudo: torch.Tensor | None = None) -> torch.Tensor:
        return embed_tokens(seq, t, self.token_embedding.weight, timeinv, static_pseudo)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        # embeddings: [N, d] or [B, N, d]
        squeeze = embeddings.dim() == 2
        if squeeze:
            embeddings = embeddings[None]
        out = self.encoder(embeddings + self.pos[None, : embeddings.shape[1]])
        return out[0] if squeeze else out

    def encode(self, seq: TokenSequence, t: int = 1,
               timeinv: TimeInvTable | None = None,
               static_pseudo: torch.Tensor | None = None) -> torch.Tensor:
        return self.forward(self.embed(seq, t, timeinv, static_pseudo))


@dataclass
class PromptConditioning:
    """Per-timestep (conditional, unconditional) token states for the sampler."""

    encoder: TextEncoder
    cond_seq: TokenSequence
    uncond_seq: TokenSequence
    timeinv: TimeInvTable | None = None
    static_pseudo: torch.Tensor | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def tokens_at(self, t: int) -> tuple[torch.Tensor, torch.Tensor]:
        key = t if (self.timeinv is not None and self.cond_seq.has_pseudo) else 0
        if key not in self._cache:
            with torch.no_grad():
                cond = self.encoder.encode(self.cond_seq, t, self.timeinv, self.static_pseudo)
                uncond = self.encoder.encode(self.uncond_seq, t)
            self._cache[key] = (cond, uncond)
        return self._cache[key]


def empty_prompt(vocab: Vocabulary) -> TokenSequence:
    return tokenize("", vocab)
