"""Procedural sprite-video corpus: rendering, captions, and oracle analysis.

Every clip is an L-frame video of a single colored sprite moving over a plain
background, rendered together with its ground-truth depth (1 = sprite,
0/0.2 = background). Captions follow a fixed template grammar, so caption
parsing and clip analysis can serve as exact oracles for retrieval and
evaluation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import FormatError, ParameterError

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "green", "blue", "yellow", "purple")
MOTIONS = ("left", "right", "up", "down", "diagonal", "bounce", "static")
BACKGROUNDS = ("black", "white", "gray", "gradient")
TEXTURES = ("checker", "stripes", "dots")

# Attribute vector layout: shape(4) + color(5) + motion(7) + background(4).
ATTR_BLOCKS = (("shape", SHAPES), ("color", COLORS), ("motion", MOTIONS), ("background", BACKGROUNDS))
ATTR_DIM = sum(len(names) for _, names in ATTR_BLOCKS)

COLOR_ANCHORS = {
    "red": np.array([0.90, 0.10, 0.10]),
    "green": np.array([0.10, 0.80, 0.15]),
    "blue": np.array([0.15, 0.25, 0.90]),
    "yellow": np.array([0.95, 0.85, 0.10]),
    "purple": np.array([0.55, 0.10, 0.90]),
}

# Sprite texture tiles alternate the base color with this darkened variant.
TEXTURE_DARK = 0.55
# Gradient background ramps top->bottom over this gray range; its depth far
# plane is the constant GRADIENT_FAR.
GRADIENT_RANGE = (0.2, 0.8)
GRADIENT_FAR = 0.2
# A pixel belongs to the sprite if it is farther than this (RGB Euclidean)
# from the background; all palette/texture colors clear it by design.
SPRITE_RGB_THRESHOLD = 0.25

SYNONYMS = {
    "crimson": "red", "scarlet": "red",
    "emerald": "green",
    "azure": "blue", "navy": "blue",
    "golden": "yellow",
    "violet": "purple",
    "disc": "circle", "disk": "circle", "ball": "circle",
    "box": "square", "block": "square",
    "wedge": "triangle",
    "starburst": "star",
    "leftward": "left", "leftwards": "left",
    "rightward": "right", "rightwards": "right",
    "upward": "up", "upwards": "up",
    "downward": "down", "downwards": "down",
    "diagonally": "diagonal",
    "bouncing": "bounce", "bounces": "bounce",
    "still": "static", "motionless": "static",
    "dark": "black",
    "pale": "white",
    "silver": "gray", "grey": "gray",
    "shaded": "gradient",
}


@dataclass(frozen=True)
class SceneParams:
    """Full description of a renderable scene; same params -> identical clip."""

    shape: str
    color: str
    motion: str
    background: str
    sprite_scale: float = 0.4
    texture_id: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ParameterError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ParameterError(f"unknown color {self.color!r}")
        if self.motion not in MOTIONS:
            raise ParameterError(f"unknown motion {self.motion!r}")
        if self.background not in BACKGROUNDS:
            raise ParameterError(f"unknown background {self.background!r}")
        if not (0.2 < self.sprite_scale < 0.6):
            raise ParameterError(f"sprite_scale {self.sprite_scale} outside (0.2, 0.6)")
        if self.texture_id is not None and self.texture_id not in TEXTURES:
            raise ParameterError(f"unknown texture {self.texture_id!r}")


@dataclass
class VideoClip:
    """L-frame RGB video, values in [0, 1], shape [L, 3, H, W]."""

    frames: np.ndarray
    caption: str = ""
    clip_id: str = ""

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class DepthSequence:
    """Per-frame depth maps aligned with a clip, shape [L, 1, H, W], 1 = nearest."""

    maps: np.ndarray

    @property
    def length(self) -> int:
        return self.maps.shape[0]


def attribute_index(block: str, name: str) -> int:
    offset = 0
    for block_name, names in ATTR_BLOCKS:
        if block_name == block:
            return offset + names.index(name)
        offset += len(names)
    raise ParameterError(f"unknown attribute block {block!r}")


def attribute_block(vec: np.ndarray, block: str) -> np.ndarray:
    offset = 0
    for block_name, names in ATTR_BLOCKS:
        if block_name == block:
            return vec[offset:offset + len(names)]
        offset += len(names)
    raise ParameterError(f"unknown attribute block {block!r}")


def one_hot_attributes(shape=None, color=None, motion=None, background=None) -> np.ndarray:
    vec = np.zeros(ATTR_DIM)
    for block, name in (("shape", shape), ("color", color), ("motion", motion), ("background", background)):
        if name is not None:
            vec[attribute_index(block, name)] = 1.0
    return vec


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def shape_mask(shape: str, half_extent: float, cx: float, cy: float, size: int) -> np.ndarray:
    """Boolean [size, size] mask of a sprite centered at (cx, cy) in pixel coords."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xs - cx
    dy = ys - cy
    e = half_extent
    if shape == "circle":
        return dx * dx + dy * dy <= e * e
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= e
    if shape == "triangle":
        # Upward triangle: apex at (cx, cy - e), base at cy + e.
        inside_y = (dy >= -e) & (dy <= e)
        half_width = (dy + e) / 2.0
        return inside_y & (np.abs(dx) <= half_width)
    if shape == "star":
        # Four-spike star (axis-aligned spikes keep the bounding box symmetric).
        theta = np.arctan2(dy, dx)
        phase = (theta * 4.0 / (2.0 * np.pi)) % 1.0
        spike = 2.0 * np.abs(phase - 0.5)  # 1 at spike tips, 0 between
        limit = e * (0.45 + 0.55 * spike)
        return np.sqrt(dx * dx + dy * dy) <= limit
    raise ParameterError(f"unknown shape {shape!r}")


def texture_values(texture_id: str, half_extent: float, cx: float, cy: float, size: int) -> np.ndarray:
    """Per-pixel 0/1 tile pattern in sprite-local coords (4x4 tiles across the sprite)."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    u = np.clip((xs - (cx - half_extent)) / (2.0 * half_extent), 0.0, 1.0 - 1e-9)
    v = np.clip((ys - (cy - half_extent)) / (2.0 * half_extent), 0.0, 1.0 - 1e-9)
    tu = np.floor(u * 4).astype(int)
    tv = np.floor(v * 4).astype(int)
    if texture_id == "checker":
        return ((tu + tv) % 2 == 0).astype(np.float64)
    if texture_id == "stripes":
        return (tu % 2 == 0).astype(np.float64)
    if texture_id == "dots":
        return (((tu % 2) == 1) & ((tv % 2) == 1)).astype(np.float64)
    raise ParameterError(f"unknown texture {texture_id!r}")


def background_image(background: str, size: int) -> np.ndarray:
    """[3, size, size] background canvas."""
    if background == "black":
        return np.zeros((3, size, size))
    if background == "white":
        return np.ones((3, size, size))
    if background == "gray":
        return np.full((3, size, size), 0.5)
    if background == "gradient":
        lo, hi = GRADIENT_RANGE
        ramp = lo + (hi - lo) * np.arange(size) / (size - 1)
        return np.broadcast_to(ramp[None, :, None], (3, size, size)).copy()
    raise ParameterError(f"unknown background {background!r}")


def _motion_path(scene: SceneParams, length: int, size: int) -> list[tuple[int, int]]:
    """Integer sprite-center positions for each frame, kept fully in-frame."""
    e = scene.sprite_scale * size / 2.0
    margin = int(np.ceil(e)) + 1
    lo, hi = margin, size - 1 - margin
    if hi < lo:
        raise ParameterError(f"sprite_scale {scene.sprite_scale} leaves no room in a {size}px frame")
    span = hi - lo
    rng = np.random.default_rng(scene.seed)
    mid = (lo + hi) // 2

    def line(u, start, end):
        return int(round(start + u * (end - start)))

    positions = []
    for i in range(length):
        u = i / (length - 1) if length > 1 else 0.0
        if scene.motion == "static":
            x = int(rng.integers(lo, hi + 1)) if i == 0 else positions[0][0]
            y = int(rng.integers(lo, hi + 1)) if i == 0 else positions[0][1]
        elif scene.motion == "left":
            x, y = line(u, hi, lo), mid
        elif scene.motion == "right":
            x, y = line(u, lo, hi), mid
        elif scene.motion == "up":
            x, y = mid, line(u, hi, lo)
        elif scene.motion == "down":
            x, y = mid, line(u, lo, hi)
        elif scene.motion == "diagonal":
            x, y = line(u, lo, hi), line(u, lo, hi)
        elif scene.motion == "bounce":
            x, y = mid, lo + int(round((1.0 - abs(2.0 * u - 1.0)) * span))
        else:
            raise ParameterError(f"unknown motion {scene.motion!r}")
        positions.append((x, y))
    return positions


def render_clip(scene: SceneParams, length: int = 16, size: int = 32) -> tuple[VideoClip, DepthSequence]:
    """Render a scene to an RGB clip plus its exact depth sequence."""
    if length < 1:
        raise ParameterError("length must be >= 1")
    e = scene.sprite_scale * size / 2.0
    positions = _motion_path(scene, length, size)
    bg = background_image(scene.background, size)
    far = GRADIENT_FAR if scene.background == "gradient" else 0.0
    base = COLOR_ANCHORS[scene.color][:, None, None]

    frames = np.empty((length, 3, size, size), dtype=np.float32)
    depths = np.empty((length, 1, size, size), dtype=np.float32)
    for i, (cx, cy) in enumerate(positions):
        mask = shape_mask(scene.shape, e, cx, cy, size)
        if scene.texture_id is None:
            sprite = np.broadcast_to(base, (3, size, size))
        else:
            tex = texture_values(scene.texture_id, e, cx, cy, size)
            sprite = base * (TEXTURE_DARK + (1.0 - TEXTURE_DARK) * tex[None])
        frame = np.where(mask[None], sprite, bg)
        frames[i] = np.clip(frame, 0.0, 1.0)
        depths[i, 0] = np.where(mask, 1.0, far)
    clip = VideoClip(frames=frames, caption=caption_of(scene))
    return clip, DepthSequence(maps=depths)


# ---------------------------------------------------------------------------
# Caption grammar
# ---------------------------------------------------------------------------

def caption_of(scene: SceneParams) -> str:
    if scene.motion == "static":
        return f"a {scene.color} {scene.shape} stays still on a {scene.background} background"
    return f"a {scene.color} {scene.shape} moves {scene.motion} on a {scene.background} background"


def parse_caption(caption: str) -> np.ndarray:
    """One-hot AttributeVector from a templated caption; unknown blocks stay zero."""
    if not caption.strip():
        raise ParameterError("empty caption")
    vec = np.zeros(ATTR_DIM)
    lookup = {name: (block, name) for block, names in ATTR_BLOCKS for name in names}
    for raw in caption.lower().replace(",", " ").replace(".", " ").split():
        word = SYNONYMS.get(raw, raw)
        if word in lookup:
            block, name = lookup[word]
            idx = attribute_index(block, name)
            vec[idx] = 1.0
    return vec


# ---------------------------------------------------------------------------
# Oracle analysis (segmentation + attribute extraction)
# ---------------------------------------------------------------------------

# Sprite blobs outside this area fraction are rejected as segmentation noise.
_AREA_BOUNDS = (0.004, 0.45)
_BORDER_MATCH_TOL = 0.15


def classify_background(frame: np.ndarray) -> tuple[str, np.ndarray]:
    """Best-matching background and per-candidate border match fractions.

    frame: [3, H, W]. Returns (name, scores[len(BACKGROUNDS)]).
    """
    size = frame.shape[1]
    border = np.zeros((size, size), dtype=bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    scores = np.empty(len(BACKGROUNDS))
    for i, name in enumerate(BACKGROUNDS):
        bg = background_image(name, size)
        dist = np.sqrt(((frame - bg) ** 2).sum(axis=0))
        scores[i] = float((dist[border] <= _BORDER_MATCH_TOL).mean())
    return BACKGROUNDS[int(np.argmax(scores))], scores


def sprite_mask_of_frame(frame: np.ndarray, background: str | None = None) -> np.ndarray:
    """Extract the sprite mask from one frame; all-False when no plausible sprite.

    Keeps the largest connected component of pixels far from the inferred
    background, then gates on a sane area fraction.
    """
    size = frame.shape[1]
    if background is None:
        background, _ = classify_background(frame)
    bg = background_image(background, size)
    dist = np.sqrt(((frame - bg) ** 2).sum(axis=0))
    raw = dist > SPRITE_RGB_THRESHOLD
    if not raw.any():
        return np.zeros((size, size), dtype=bool)
    raw = ndimage.binary_closing(raw, structure=np.ones((3, 3), dtype=bool))
    labels, n = ndimage.label(raw)
    if n == 0:
        return np.zeros((size, size), dtype=bool)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    mask = labels == int(np.argmax(counts))
    mask = ndimage.binary_fill_holes(mask)
    area = mask.mean()
    if not (_AREA_BOUNDS[0] <= area <= _AREA_BOUNDS[1]):
        return np.zeros((size, size), dtype=bool)
    return mask


def _mask_centroid(mask: np.ndarray) -> tuple[float, float] | None:
    if not mask.any():
        return None
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())


_TEMPLATE_BANK: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}
_CROP_SCORE_CACHE: dict[bytes, np.ndarray] = {}


def _template_bank(shape: str, canvas: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack of shape templates over a fine half-extent scan, plus their areas."""
    key = (shape, canvas)
    if key not in _TEMPLATE_BANK:
        c = (canvas - 1) / 2.0
        extents = np.arange(1.5, canvas / 2.0 + 0.01, 0.04)
        stack = np.stack([shape_mask(shape, e, c, c, canvas) for e in extents])
        _TEMPLATE_BANK[key] = (stack, stack.sum(axis=(1, 2)))
    return _TEMPLATE_BANK[key]


def _shape_scores(masks: list[np.ndarray]) -> np.ndarray:
    """Mean IoU of extracted masks against area-matched shape templates.

    Each mask's bounding box is embedded in a padded square canvas; per shape
    the template half-extent best matching the mask area is used, so bulkier
    shapes cannot win simply by filling the box.
    """
    totals = np.zeros(len(SHAPES))
    n = 0
    for mask in masks:
        if not mask.any():
            continue
        ys, xs = np.nonzero(mask)
        y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
        crop = mask[y0:y1 + 1, x0:x1 + 1]
        key = crop.tobytes() + bytes(crop.shape)
        scores = _CROP_SCORE_CACHE.get(key)
        if scores is None:
            h, w = crop.shape
            side = max(h, w)
            pad = max(2, side // 3)
            canvas_side = side + 2 * pad
            canvas = np.zeros((canvas_side, canvas_side), dtype=bool)
            oy = pad + (side - h) // 2
            ox = pad + (side - w) // 2
            canvas[oy:oy + h, ox:ox + w] = crop
            area = canvas.sum()
            scores = np.empty(len(SHAPES))
            for j, shape in enumerate(SHAPES):
                stack, areas = _template_bank(shape, canvas_side)
                template = stack[int(np.argmin(np.abs(areas - area)))]
                inter = np.logical_and(canvas, template).sum()
                union = np.logical_or(canvas, template).sum()
                scores[j] = inter / union if union else 0.0
            if len(_CROP_SCORE_CACHE) > 4096:
                _CROP_SCORE_CACHE.clear()
            _CROP_SCORE_CACHE[key] = scores
        totals += scores
        n += 1
    return totals / n if n else totals


def _color_scores(frames: np.ndarray, masks: list[np.ndarray]) -> np.ndarray:
    pixels = [frames[i][:, m] for i, m in enumerate(masks) if m.any()]
    if not pixels:
        return np.zeros(len(COLORS))
    mean_rgb = np.concatenate(pixels, axis=1).mean(axis=1)
    dists = np.array([np.linalg.norm(mean_rgb - COLOR_ANCHORS[c]) for c in COLORS])
    return np.maximum(0.0, 1.0 - dists)


def _motion_class(centroids: list[tuple[float, float] | None]) -> tuple[str | None, float]:
    """Classify motion from per-frame centroids; returns (name, confidence)."""
    pts = [c for c in centroids if c is not None]
    if len(pts) < max(2, len(centroids) // 2):
        if len(centroids) == 1 and pts:
            return "static", 1.0
        return None, 0.0
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    net_x, net_y = xs[-1] - xs[0], ys[-1] - ys[0]
    range_x, range_y = xs.max() - xs.min(), ys.max() - ys.min()
    move_tol = 1.5

    if range_y >= 2.0 and abs(net_y) <= 0.35 * range_y and range_x < move_tol:
        return "bounce", 1.0
    if range_x < move_tol and range_y < move_tol:
        return "static", 1.0
    moved_x, moved_y = abs(net_x) >= move_tol, abs(net_y) >= move_tol
    if moved_x and moved_y:
        return "diagonal", 1.0
    if moved_x:
        return ("right" if net_x > 0 else "left"), 1.0
    if moved_y:
        return ("down" if net_y > 0 else "up"), 1.0
    # Displacement exists but no direction dominates: weak evidence.
    return "static", 0.3


def _finalize_block(scores: np.ndarray, top_threshold: float, margin: float) -> np.ndarray:
    """Sharpen decisive evidence to a one-hot; otherwise keep soft scores with sum <= 1."""
    if scores.max() <= 0:
        return np.zeros_like(scores)
    order = np.argsort(scores)
    top, second = scores[order[-1]], scores[order[-2]] if len(scores) > 1 else 0.0
    if top >= top_threshold and top - second >= margin:
        out = np.zeros_like(scores)
        out[order[-1]] = 1.0
        return out
    return scores / max(1.0, scores.sum())


def extract_attributes(clip: VideoClip) -> np.ndarray:
    """Oracle AttributeVector for a clip: soft scores, one-hot when decisive.

    Shape, color, and background are scored per frame and averaged; motion is
    classified clip-wise from centroid displacement.
    """
    frames = np.asarray(clip.frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ParameterError("clip must have shape [L, 3, H, W] with L >= 1")
    vec = np.zeros(ATTR_DIM)

    bg_scores = np.zeros(len(BACKGROUNDS))
    masks = []
    for i in range(frames.shape[0]):
        bg_name, scores = classify_background(frames[i])
        bg_scores += scores
        masks.append(sprite_mask_of_frame(frames[i], bg_name))
    bg_scores /= frames.shape[0]
    attribute_block(vec, "background")[:] = _finalize_block(bg_scores, 0.8, 0.3)

    attribute_block(vec, "shape")[:] = _finalize_block(_shape_scores(masks), 0.9, 0.08)
    attribute_block(vec, "color")[:] = _finalize_block(_color_scores(frames, masks), 0.85, 0.1)

    motion, confidence = _motion_class([_mask_centroid(m) for m in masks])
    if motion is not None:
        attribute_block(vec, "motion")[attribute_index("motion", motion) - attribute_index("motion", MOTIONS[0])] = confidence
    return vec


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

@dataclass
class CorpusProfile:
    """Knobs for procedural corpus sampling."""

    length: int = 16
    size: int = 32
    scale_range: tuple[float, float] = (0.28, 0.42)
    scale_quantum: float = 0.02


def _all_combinations() -> list[tuple[str, str, str, str]]:
    return [(s, c, m, b) for s in SHAPES for c in COLORS for m in MOTIONS for b in BACKGROUNDS]


def save_clip_files(out_dir: Path, clip_id: str, clip: VideoClip, depth: DepthSequence) -> None:
    clip_dir = out_dir / "clips" / clip_id
    clip_dir.mkdir(parents=True, exist_ok=True)
    for i in range(clip.length):
        rgb = np.round(clip.frames[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(clip_dir / f"frame_{i:03d}.png")
        d16 = np.round(depth.maps[i, 0] * 65535.0).astype(np.uint16)
        Image.fromarray(d16).save(clip_dir / f"depth_{i}.png")


def load_clip(corpus_dir: Path | str, clip_id: str, caption: str = "") -> VideoClip:
    clip_dir = Path(corpus_dir) / "clips" / clip_id
    paths = sorted(clip_dir.glob("frame_*.png"))
    if not paths:
        raise FormatError(f"no frames under {clip_dir}")
    frames = np.stack([np.asarray(Image.open(p), dtype=np.float32).transpose(2, 0, 1) / 255.0 for p in paths])
    return VideoClip(frames=frames, caption=caption, clip_id=clip_id)


def load_depth(corpus_dir: Path | str, clip_id: str) -> DepthSequence:
    clip_dir = Path(corpus_dir) / "clips" / clip_id
    paths = sorted(clip_dir.glob("depth_*.png"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise FormatError(f"no depth maps under {clip_dir}")
    maps = np.stack([np.asarray(Image.open(p), dtype=np.float32)[None] / 65535.0 for p in paths])
    return DepthSequence(maps=maps)


def load_manifest(corpus_dir: Path | str) -> list[dict]:
    path = Path(corpus_dir) / "manifest.jsonl"
    records = []
    try:
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest {path}: {exc}") from exc
    return records


def manifest_hash(corpus_dir: Path | str) -> str:
    data = (Path(corpus_dir) / "manifest.jsonl").read_bytes()
    return hashlib.sha256(data).hexdigest()


def generate_corpus(n_clips: int, profile: CorpusProfile, seed: int, out_dir: Path | str) -> Path:
    """Render n_clips scenes to out_dir and write manifest.jsonl.

    Attribute combinations are drawn without replacement until the full cross
    product is exhausted, then with replacement. Deterministic per seed.
    """
    if n_clips < 1:
        raise ParameterError("n_clips must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    rng = np.random.default_rng(seed)
    combos = _all_combinations()
    order = rng.permutation(len(combos))
    picks = [combos[i] for i in order[:n_clips]]
    while len(picks) < n_clips:
        picks.append(combos[int(rng.integers(len(combos)))])

    lo, hi = profile.scale_range
    q = profile.scale_quantum
    n_steps = max(1, int(round((hi - lo) / q)))
    records = []
    for idx, (shape, color, motion, background) in enumerate(picks):
        scale = lo + q * int(rng.integers(0, n_steps + 1))
        scene = SceneParams(shape=shape, color=color, motion=motion, background=background,
                            sprite_scale=round(scale, 4), seed=seed ^ idx)
        clip, depth = render_clip(scene, length=profile.length, size=profile.size)
        clip_id = f"clip_{idx:05d}"
        clip.clip_id = clip_id
        save_clip_files(out_dir, clip_id, clip, depth)
        records.append({
            "clip_id": clip_id,
            "caption": clip.caption,
            "scene_params": asdict(scene),
            "length": profile.length,
        })

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path
