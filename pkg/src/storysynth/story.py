"""Story-script parsing and end-to-end orchestration: per plot, retrieve a
motion structure, sample under the plot's prompt, decode, and write outputs."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .bundle import ModelBundle
from .corpus import DepthSequence, VideoClip
from .diffusion import SamplerConfig
from .errors import FormatError, NotFoundError, ParameterError
from .personalize import PersonalizationArtifacts, rerender_character
from .retrieval import RetrievalIndex, motion_structure_of, query
from .structure import GuidancePolicy
from .text import PSEUDO_TOKEN


@dataclass
class Plot:
    query: str
    prompt: str
    seed: int
    guidance_fraction: float = 1.0
    frames: int = 16
    retrieval_rank: int = 1

    def uses_pseudo(self) -> bool:
        return PSEUDO_TOKEN in self.prompt.split()


@dataclass
class StoryScript:
    plots: list[Plot]
    name: str = "story"
    concept_bundle: str | None = None


@dataclass
class StoryOutput:
    clips: list[VideoClip]
    manifest: dict


def parse_story(path: Path | str) -> StoryScript:
    """Load and validate a story script (JSON with a "plots" array)."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise FormatError(f"story script {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or "plots" not in payload:
        raise FormatError('story script must be an object with a "plots" array')
    raw_plots = payload["plots"]
    if not isinstance(raw_plots, list) or not raw_plots:
        raise FormatError('"plots" must be a non-empty array')

    global_seed = int(payload.get("seed", 0))
    plots = []
    for i, rec in enumerate(raw_plots):
        for fld in ("query", "prompt"):
            if fld not in rec:
                raise FormatError(f'plot {i} is missing required field "{fld}"')
        g = float(rec.get("guidance_fraction", 1.0))
        if not (0.0 <= g <= 1.0):
            raise FormatError(f"plot {i}: guidance_fraction {g} outside [0, 1]")
        plots.append(Plot(
            query=rec["query"],
            prompt=rec["prompt"],
            seed=int(rec.get("seed", global_seed ^ i)),
            guidance_fraction=g,
            frames=int(rec.get("frames", 16)),
            retrieval_rank=int(rec.get("retrieval_rank", 1)),
        ))

    script = StoryScript(plots=plots, name=payload.get("name", path.stem),
                         concept_bundle=payload.get("concept_bundle"))
    if any(p.uses_pseudo() for p in plots) and not script.concept_bundle:
        raise FormatError(f"a prompt names {PSEUDO_TOKEN} but no concept_bundle is set")
    return script


def _fit_depth(depth: DepthSequence, frames: int) -> DepthSequence:
    maps = depth.maps
    if maps.shape[0] >= frames:
        return DepthSequence(maps=maps[:frames].copy())
    reps = int(np.ceil(frames / maps.shape[0]))
    return DepthSequence(maps=np.concatenate([maps] * reps, axis=0)[:frames])


def synthesize_plot(
    plot: Plot,
    index: RetrievalIndex,
    bundle: ModelBundle,
    artifacts: PersonalizationArtifacts | None = None,
) -> tuple[VideoClip, dict]:
    """Retrieve, sample, and decode one plot; deterministic per plot record."""
    ranked = query(index, plot.query, k=plot.retrieval_rank)
    if len(ranked) < plot.retrieval_rank:
        raise NotFoundError(f"retrieval returned {len(ranked)} results, need rank {plot.retrieval_rank}")
    clip_id, score = ranked[plot.retrieval_rank - 1]
    depth = _fit_depth(motion_structure_of(index, clip_id), plot.frames)

    uses_pseudo = plot.uses_pseudo()
    if uses_pseudo and artifacts is None:
        raise ParameterError(f"plot prompt names {PSEUDO_TOKEN} but no concept artifacts are loaded")
    w = (bundle.config.sampler.personalized_guidance_scale if uses_pseudo
         else bundle.config.sampler.guidance_scale)
    sampler = SamplerConfig(kind=bundle.config.sampler.kind, steps=bundle.config.sampler.steps,
                            guidance_scale=w, eta=bundle.config.sampler.eta, seed=plot.seed)
    policy = GuidancePolicy(guidance_fraction=plot.guidance_fraction)
    clip = rerender_character(plot.prompt, bundle, artifacts if uses_pseudo else None,
                              depth, policy, sampler)
    clip.caption = plot.prompt
    record = {
        "query": plot.query,
        "prompt": plot.prompt,
        "retrieved_clip_id": clip_id,
        "retrieval_score": round(score, 9),
        "retrieval_rank": plot.retrieval_rank,
        "seed": plot.seed,
        "guidance_fraction": plot.guidance_fraction,
        "frames": plot.frames,
        "guidance_scale": w,
        "personalized": uses_pseudo,
    }
    return clip, record


def _write_clip(out_dir: Path, stem: str, clip: VideoClip) -> dict:
    frames_dir = out_dir / stem
    frames_dir.mkdir(parents=True, exist_ok=True)
    images = []
    paths = []
    for i in range(clip.length):
        rgb = np.round(np.clip(clip.frames[i], 0, 1).transpose(1, 2, 0) * 255.0).astype(np.uint8)
        img = Image.fromarray(rgb, "RGB")
        p = frames_dir / f"frame_{i:03d}.png"
        img.save(p)
        images.append(img)
        paths.append(str(p.relative_to(out_dir)))
    gif_path = out_dir / f"{stem}.gif"
    images[0].save(gif_path, save_all=True, append_images=images[1:], duration=125, loop=0)
    return {"frames": paths, "gif": gif_path.name, "images": images}


def synthesize_story(
    script: StoryScript,
    index: RetrievalIndex,
    bundle: ModelBundle,
    artifacts: PersonalizationArtifacts | None,
    out_dir: Path | str,
    jobs: int = 1,
) -> StoryOutput:
    """Run every plot in order, writing per-plot frames/GIFs, a concatenated
    story GIF, and a manifest; any plot failure aborts with its index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list[dict | None] = [None] * len(script.plots)
    clips: list[VideoClip | None] = [None] * len(script.plots)

    def run(i: int):
        return synthesize_plot(script.plots[i], index, bundle, artifacts)

    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                for i, (clip, rec) in enumerate(pool.map(run, range(len(script.plots)))):
                    clips[i], records[i] = clip, rec
        else:
            for i in range(len(script.plots)):
                clips[i], records[i] = run(i)
    except Exception as exc:
        failed_at = next(i for i, c in enumerate(clips) if c is None)
        manifest = {"story": script.name, "failed_at": failed_at,
                    "plots": [r for r in records if r is not None]}
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        raise RuntimeError(f"plot {failed_at} failed: {exc}") from exc

    all_images = []
    for i, (clip, rec) in enumerate(zip(clips, records)):
        written = _write_clip(out_dir, f"plot_{i}", clip)
        all_images.extend(written.pop("images"))
        rec["outputs"] = written
    story_gif = out_dir / "story.gif"
    all_images[0].save(story_gif, save_all=True, append_images=all_images[1:], duration=125, loop=0)

    manifest = {"story": script.name, "concept_bundle": script.concept_bundle,
                "story_gif": story_gif.name, "plots": records}
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return StoryOutput(clips=clips, manifest=manifest)


def manifest_digest(out_dir: Path | str) -> str:
    return hashlib.sha256((Path(out_dir) / "manifest.json").read_bytes()).hexdigest()
