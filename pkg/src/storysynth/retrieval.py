"""Text-to-motion-structure retrieval over a corpus manifest.

Captions are embedded twice: parsed attribute one-hots catch paraphrases, a
hashed-token vector catches exact wording. Queries return ranked clip ids whose
stored ground-truth depth then serves as structure guidance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import DepthSequence, load_depth, load_manifest, manifest_hash, parse_caption
from .errors import FormatError, NotFoundError, ParameterError

HASH_DIM = 64
ATTR_WEIGHT = 0.7
TOKEN_WEIGHT = 0.3


def caption_tokens(text: str) -> list[str]:
    return text.lower().replace(",", " ").replace(".", " ").split()


def _hash_vector(tokens: list[str]) -> np.ndarray:
    vec = np.zeros(HASH_DIM)
    for tok in tokens:
        digest = hashlib.sha1(tok.encode("utf-8")).digest()
        vec[int.from_bytes(digest[:4], "big") % HASH_DIM] += 1.0
    return vec


def caption_embedding(text: str) -> np.ndarray:
    """Concatenated (attribute, hashed-token) embedding, each part unit-normalized."""
    attrs = parse_caption(text)
    na = np.linalg.norm(attrs)
    if na > 0:
        attrs = attrs / na
    toks = _hash_vector(caption_tokens(text))
    nt = np.linalg.norm(toks)
    if nt > 0:
        toks = toks / nt
    return np.concatenate([ATTR_WEIGHT * attrs, TOKEN_WEIGHT * toks])


@dataclass
class RetrievalIndex:
    entries: list[dict]
    embeddings: np.ndarray
    corpus_dir: str
    manifest_sha: str

    def __len__(self) -> int:
        return len(self.entries)


def build_index(corpus_dir: Path | str) -> RetrievalIndex:
    corpus_dir = Path(corpus_dir)
    records = load_manifest(corpus_dir)
    entries = []
    vectors = []
    for rec in records:
        try:
            clip_id, caption = rec["clip_id"], rec["caption"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"manifest record missing clip_id/caption: {rec!r}") from exc
        entries.append({
            "clip_id": clip_id,
            "caption": caption,
            "attributes": parse_caption(caption).tolist(),
            "tokens": sorted(caption_tokens(caption)),
        })
        vectors.append(caption_embedding(caption))
    return RetrievalIndex(
        entries=entries,
        embeddings=np.stack(vectors) if vectors else np.zeros((0, 20 + HASH_DIM)),
        corpus_dir=str(corpus_dir),
        manifest_sha=manifest_hash(corpus_dir),
    )


def save_index(index: RetrievalIndex, path: Path | str | None = None) -> Path:
    path = Path(path) if path else Path(index.corpus_dir) / "index.json"
    payload = {
        "corpus_dir": index.corpus_dir,
        "manifest_sha": index.manifest_sha,
        "entries": index.entries,
        "embeddings": index.embeddings.tolist(),
    }
    path.write_text(json.dumps(payload, sort_keys=True))
    return path


def load_index(path: Path | str) -> RetrievalIndex:
    try:
        payload = json.loads(Path(path).read_text())
        index = RetrievalIndex(
            entries=payload["entries"],
            embeddings=np.asarray(payload["embeddings"], dtype=np.float64),
            corpus_dir=payload["corpus_dir"],
            manifest_sha=payload["manifest_sha"],
        )
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"corrupt index file {path}: {exc}") from exc
    current = manifest_hash(index.corpus_dir)
    if current != index.manifest_sha:
        raise FormatError(f"index is stale: manifest hash {current[:12]} != {index.manifest_sha[:12]}")
    return index


def index_hash(index: RetrievalIndex) -> str:
    h = hashlib.sha256()
    h.update(index.manifest_sha.encode())
    h.update(np.ascontiguousarray(index.embeddings).tobytes())
    return h.hexdigest()


def query(index: RetrievalIndex, text: str, k: int) -> list[tuple[str, float]]:
    """Top-k (clip_id, cosine score), ties broken by clip_id order."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    if not text.strip():
        raise ParameterError("empty query")
    q = caption_embedding(text)
    nq = np.linalg.norm(q)
    norms = np.linalg.norm(index.embeddings, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = index.embeddings @ q / np.where(norms * nq > 0, norms * nq, 1.0)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.entries[i]["clip_id"]))
    return [(index.entries[i]["clip_id"], float(scores[i])) for i in order[:k]]


def motion_structure_of(index: RetrievalIndex, clip_id: str) -> DepthSequence:
    if not any(e["clip_id"] == clip_id for e in index.entries):
        raise NotFoundError(f"clip_id {clip_id!r} not in index")
    return load_depth(index.corpus_dir, clip_id)
