"""Evaluation metrics: Fréchet feature distance, semantic alignment, ID fidelity,
and structure adherence, all built on the corpus oracle instead of pretrained
feature networks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .corpus import (
    VideoClip,
    DepthSequence,
    extract_attributes,
    parse_caption,
    sprite_mask_of_frame,
)
from .errors import ParameterError, ShapeError

CANONICAL_PATCH = 12


@dataclass
class FeatureSet:
    """n x p feature matrix with a tag identifying the extractor that made it."""

    features: np.ndarray
    extractor_id: str = "oracle"


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """Fréchet distance between Gaussians given exact first/second moments."""
    mu_a = np.atleast_1d(np.asarray(mu_a, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ShapeError("moment dimensions do not match")
    diff = mu_a - mu_b
    a_half = _sym_sqrt(cov_a)
    inner = a_half @ cov_b @ a_half
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    dist = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(vals).sum())
    # eigenvalue dust can leave a tiny negative residue
    return max(dist, 0.0)


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    """Fréchet distance between the empirical moments of two feature sets."""
    fa = np.asarray(a.features, dtype=np.float64)
    fb = np.asarray(b.features, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2:
        raise ShapeError("features must be [n, p]")
    if fa.shape[1] != fb.shape[1]:
        raise ShapeError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ParameterError("need at least 2 samples per set for a covariance")
    return frechet_from_moments(
        fa.mean(axis=0), np.cov(fa, rowvar=False),
        fb.mean(axis=0), np.cov(fb, rowvar=False),
    )


def clip_features(clip: VideoClip) -> np.ndarray:
    """Oracle feature vector: attributes (20) + 8-bin RGB histograms (24) + motion energy (1)."""
    frames = np.asarray(clip.frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ParameterError("clip must have shape [L, 3, H, W] with L >= 1")
    attrs = extract_attributes(clip)
    hists = []
    for ch in range(3):
        h, _ = np.histogram(frames[:, ch], bins=8, range=(0.0, 1.0))
        hists.append(h / frames[:, ch].size)
    if frames.shape[0] > 1:
        motion = float(np.abs(np.diff(frames, axis=0)).mean())
    else:
        motion = 0.0
    return np.concatenate([attrs, *hists, [motion]])


def feature_set(clips: list[VideoClip], extractor_id: str = "oracle") -> FeatureSet:
    return FeatureSet(features=np.stack([clip_features(c) for c in clips]), extractor_id=extractor_id)


def semantic_alignment(clip: VideoClip, caption: str) -> float:
    """Cosine between the caption's attribute one-hots and the clip's oracle attributes."""
    q = parse_caption(caption)
    a = extract_attributes(clip)
    nq, na = np.linalg.norm(q), np.linalg.norm(a)
    if nq == 0.0 or na == 0.0:
        return 0.0
    return float(np.dot(q, a) / (nq * na))


def canonical_patch(image: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Sprite patch cropped to its bounding box and resized to a canonical grid.

    image: [3, H, W]. Returns (patch [3, P, P], in-sprite mask [P, P]) or None
    when no sprite is found. The mask restricts comparisons to sprite pixels so
    whatever background falls inside the box cannot contribute.
    """
    mask = sprite_mask_of_frame(np.asarray(image, dtype=np.float64))
    if not mask.any():
        return None
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
    crop = np.asarray(image, dtype=np.float64)[:, y0:y1 + 1, x0:x1 + 1]
    zoom = (1.0, CANONICAL_PATCH / crop.shape[1], CANONICAL_PATCH / crop.shape[2])
    patch = ndimage.zoom(crop, zoom, order=1, grid_mode=True, mode="nearest")
    mcrop = mask[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
    mpatch = ndimage.zoom(mcrop, zoom[1:], order=1, grid_mode=True, mode="nearest")
    return patch, mpatch > 0.5


def _masked_ncc(a: np.ndarray, ma: np.ndarray, b: np.ndarray, mb: np.ndarray) -> float:
    joint = np.logical_and(ma, mb)
    if joint.sum() < 8:
        return 0.0
    # Center each channel separately so flat color offsets carry no
    # correlation; what remains is the spatial texture.
    av = a[:, joint]
    bv = b[:, joint]
    av = (av - av.mean(axis=1, keepdims=True)).ravel()
    bv = (bv - bv.mean(axis=1, keepdims=True)).ravel()
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(av, bv) / (na * nb))


def id_fidelity(clip: VideoClip, concept_images: list[np.ndarray]) -> float:
    """Mean normalized cross-correlation between the clip's sprite patches and
    the concept images' sprite patches, pose-aligned by bounding-box crop."""
    concept_patches = [p for p in (canonical_patch(img) for img in concept_images) if p is not None]
    if not concept_patches:
        raise ParameterError("no sprite found in any concept image")
    frame_patches = [p for p in (canonical_patch(f) for f in clip.frames) if p is not None]
    if not frame_patches:
        warnings.warn("id_fidelity: no sprite detected in any frame, returning 0")
        return 0.0
    scores = [_masked_ncc(fp, fm, cp, cm) for fp, fm in frame_patches for cp, cm in concept_patches]
    return float(np.mean(scores))


def structure_iou(clip: VideoClip, depth: DepthSequence) -> float:
    """Per-frame IoU between (depth > 0.5) and the clip's extracted sprite mask."""
    frames = np.asarray(clip.frames, dtype=np.float64)
    maps = np.asarray(depth.maps, dtype=np.float64)
    if frames.shape[0] != maps.shape[0] or frames.shape[2:] != maps.shape[2:]:
        raise ShapeError(f"clip {frames.shape} and depth {maps.shape} do not align")
    ious = []
    for i in range(frames.shape[0]):
        target = maps[i, 0] > 0.5
        mask = sprite_mask_of_frame(frames[i])
        union = np.logical_or(target, mask).sum()
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(np.logical_and(target, mask).sum() / union)
    return float(np.mean(ious))
