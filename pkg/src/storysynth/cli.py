"""Command-line pipeline: data generation, the three training stages, indexing,
retrieval, personalization, rerendering, story synthesis, and evaluation."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import bundle as bundle_mod
from .bundle import ModelBundle, load_bundle
from .codec import encode_frames, identity_codec, save_codec, train_autoencoder
from .config import GlobalConfig
from .corpus import CorpusProfile, generate_corpus, load_clip, load_depth, load_manifest
from .denoiser import save_denoiser, train_base
from .diffusion import SamplerConfig, make_schedule
from .metrics import FeatureSet, clip_features, frechet_distance, semantic_alignment, structure_iou
from .personalize import (ConceptDataset, PersonalizationConfig, load_artifacts, load_concept_dir,
                          rerender_character, save_artifacts, save_concept_dir, train_personalization)
from .retrieval import build_index, load_index, motion_structure_of, query, save_index
from .story import parse_story, synthesize_story
from .structure import GuidancePolicy, train_structure_encoder
from .text import Vocabulary, tokenize
from .checkpoints import save_blob


def _load_config(args) -> GlobalConfig:
    if args.config:
        return GlobalConfig.from_json(args.config)
    return GlobalConfig()


def _corpus_tensors(corpus_dir: Path, codec, vocab):
    records = load_manifest(corpus_dir)
    latents, depths, seqs = [], [], []
    for rec in records:
        clip = load_clip(corpus_dir, rec["clip_id"], caption=rec["caption"])
        depth = load_depth(corpus_dir, rec["clip_id"])
        latents.append(encode_frames(clip, codec).z)
        depths.append(torch.as_tensor(depth.maps, dtype=torch.float32))
        seqs.append(tokenize(rec["caption"], vocab))
    return torch.stack(latents), torch.stack(depths), seqs, records


def cmd_gen_data(args):
    cfg = _load_config(args)
    profile = CorpusProfile(length=cfg.frames, size=cfg.frame_size)
    manifest = generate_corpus(args.n, profile, args.seed, args.out)
    print(f"wrote {args.n} clips to {args.out} (manifest: {manifest})")


def cmd_train_codec(args):
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if cfg.codec.mode == "identity":
        codec = identity_codec()
    else:
        records = load_manifest(args.corpus)
        frames = np.concatenate([load_clip(args.corpus, r["clip_id"]).frames for r in records])
        codec = train_autoencoder(frames, steps=cfg.codec.train_steps,
                                  latent_channels=cfg.codec.latent_channels, seed=args.seed)
        print(f"codec trained: recon MSE {codec.stats['recon_mse']:.5f}")
    save_codec(codec, workdir / bundle_mod.CODEC_FILE)
    cfg.to_json(workdir / bundle_mod.CONFIG_FILE)
    Vocabulary.default().save(workdir / bundle_mod.VOCAB_FILE)
    print(f"saved codec to {workdir / bundle_mod.CODEC_FILE}")


def cmd_train_base(args):
    cfg = _load_config(args)
    bundle = load_bundle(args.workdir, require=("codec",))
    latents, _, seqs, _ = _corpus_tensors(Path(args.corpus), bundle.codec, bundle.vocab)
    schedule = bundle.schedule
    steps = args.steps or cfg.train.base_steps
    model, text_encoder, history = train_base(
        latents, seqs, bundle.vocab, cfg.denoiser, schedule, steps, args.seed,
        batch_size=cfg.train.batch_size, train_frames=cfg.train.train_frames,
        lr=cfg.train.base_lr, cfg_dropout=cfg.train.cfg_dropout,
        checkpoint_dir=args.workdir, log_every=args.log_every,
    )
    save_denoiser(model, Path(args.workdir) / bundle_mod.BASE_FILE, step=steps, seed=args.seed,
                  codec_id=bundle.codec.codec_id)
    save_blob(Path(args.workdir) / bundle_mod.TEXT_FILE, {"dim": text_encoder.dim},
              text_encoder.state_dict())
    print(f"base trained {steps} steps; loss {np.mean(history[:100]):.4f} -> {np.mean(history[-100:]):.4f}")


def cmd_train_structure(args):
    cfg = _load_config(args)
    bundle = load_bundle(args.workdir, require=("codec", "base"))
    latents, depths, seqs, _ = _corpus_tensors(Path(args.corpus), bundle.codec, bundle.vocab)
    steps = args.steps or cfg.train.structure_steps
    encoder, history = train_structure_encoder(
        latents, depths, seqs, bundle.text_encoder, bundle.denoiser, bundle.schedule,
        steps=steps, batch_size=cfg.train.batch_size, train_frames=cfg.train.train_frames,
        lr=cfg.train.structure_lr, cfg_dropout=cfg.train.cfg_dropout, seed=args.seed,
        log_every=args.log_every,
    )
    from .structure import save_structure_encoder
    save_structure_encoder(encoder, Path(args.workdir) / bundle_mod.STRUCT_FILE,
                           meta={"steps": steps, "seed": args.seed})
    print(f"structure encoder trained {steps} steps; loss {np.mean(history[:100]):.4f} -> {np.mean(history[-100:]):.4f}")


def cmd_index(args):
    index = build_index(args.corpus)
    path = save_index(index)
    print(f"indexed {len(index)} clips -> {path}")


def cmd_retrieve(args):
    index = load_index(Path(args.corpus) / "index.json")
    for clip_id, score in query(index, args.query, args.k):
        print(f"{clip_id}\t{score:.6f}")


def cmd_personalize(args):
    bundle = load_bundle(args.workdir, require=("codec", "base", "structure"))
    concept = load_concept_dir(args.concept)
    pcfg = PersonalizationConfig(steps=args.steps, lr=args.lr)
    artifacts = train_personalization(bundle, concept, args.mode, pcfg, args.seed,
                                      corpus_dir=args.corpus, log_every=args.log_every)
    out = Path(args.concept) / f"artifacts_{args.mode}.ckpt"
    save_artifacts(artifacts, out)
    print(f"trained {args.mode} for {args.steps} steps -> {out}")


def cmd_rerender(args):
    bundle = load_bundle(args.workdir, require=("codec", "base", "structure"))
    artifacts = load_artifacts(args.artifacts)
    index = load_index(Path(args.corpus) / "index.json")
    depth = motion_structure_of(index, args.motion_clip)
    sampler = SamplerConfig(steps=bundle.config.sampler.steps,
                            guidance_scale=bundle.config.sampler.personalized_guidance_scale,
                            seed=args.seed)
    policy = GuidancePolicy(guidance_fraction=args.guidance_fraction)
    clip = rerender_character(args.prompt, bundle, artifacts, depth, policy, sampler)
    from .story import _write_clip
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = _write_clip(out_dir, "rerender", clip)
    print(f"wrote {out_dir / written['gif']}")


def cmd_story(args):
    script = parse_story(args.script)
    bundle = load_bundle(args.workdir, require=("codec", "base", "structure"))
    index = load_index(Path(args.corpus) / "index.json")
    artifacts = None
    if script.concept_bundle:
        mode = args.mode or "timeinv_lora"
        artifacts = load_artifacts(Path(script.concept_bundle) / f"artifacts_{mode}.ckpt")
    out_dir = Path(args.out) / script.name
    output = synthesize_story(script, index, bundle, artifacts, out_dir, jobs=args.jobs)
    print(f"wrote {len(output.clips)} clips under {out_dir}")


def cmd_eval(args):
    bundle = load_bundle(args.workdir, require=("codec", "base", "structure"))
    index = load_index(Path(args.corpus) / "index.json")
    records = load_manifest(args.corpus)[: args.samples]
    from .corpus import VideoClip

    real_feats, fake_feats, rows = [], [], []
    for i, rec in enumerate(records):
        real = load_clip(args.corpus, rec["clip_id"], caption=rec["caption"])
        depth = motion_structure_of(index, rec["clip_id"])
        sampler = SamplerConfig(steps=bundle.config.sampler.steps,
                                guidance_scale=bundle.config.sampler.guidance_scale,
                                seed=args.seed ^ i)
        clip = rerender_character(rec["caption"], bundle, None, depth,
                                  GuidancePolicy(guidance_fraction=args.guidance_fraction), sampler)
        real_feats.append(clip_features(real))
        fake_feats.append(clip_features(clip))
        rows.append({
            "clip_id": rec["clip_id"],
            "semantic_alignment": semantic_alignment(clip, rec["caption"]),
            "structure_iou": structure_iou(clip, depth),
        })
    report = {
        "n_samples": len(rows),
        "frechet_distance": frechet_distance(FeatureSet(np.stack(real_feats)),
                                             FeatureSet(np.stack(fake_feats))),
        "semantic_alignment": float(np.mean([r["semantic_alignment"] for r in rows])),
        "structure_iou": float(np.mean([r["structure_iou"] for r in rows])),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="storysynth",
                                     description="retrieval-augmented sprite-video synthesis")
    parser.add_argument("--config", help="global config JSON", default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the sprite corpus")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-codec", help="train the latent codec")
    p.add_argument("--corpus", required=True)
    p.add_argument("--workdir", required=True)
    p.set_defaults(fn=cmd_train_codec)

    p = sub.add_parser("train-base", help="train the text-to-video base model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log-every", type=int, default=500)
    p.set_defaults(fn=cmd_train_base)

    p = sub.add_parser("train-structure", help="train the depth structure encoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log-every", type=int, default=500)
    p.set_defaults(fn=cmd_train_structure)

    p = sub.add_parser("index", help="build the retrieval index")
    p.add_argument("--corpus", required=True)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("retrieve", help="query the retrieval index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("personalize", help="train concept personalization artifacts")
    p.add_argument("--workdir", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--concept", required=True, help="concept bundle directory")
    p.add_argument("--mode", default="timeinv_lora")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--log-every", type=int, default=200)
    p.set_defaults(fn=cmd_personalize)

    p = sub.add_parser("rerender", help="rerender the concept under a motion structure")
    p.add_argument("--workdir", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--artifacts", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--motion-clip", required=True)
    p.add_argument("--guidance-fraction", type=float, default=1.0)
    p.add_argument("--out", default="out/rerender")
    p.set_defaults(fn=cmd_rerender)

    p = sub.add_parser("story", help="synthesize a full story script")
    p.add_argument("--workdir", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--mode", default=None, help="personalization artifacts to load")
    p.add_argument("--out", default="out")
    p.set_defaults(fn=cmd_story)

    p = sub.add_parser("eval", help="evaluate generation quality against the corpus")
    p.add_argument("--workdir", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--guidance-fraction", type=float, default=1.0)
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(fn=cmd_eval)

    args = parser.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
