import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from storysynth.corpus import (
    ATTR_BLOCKS,
    BACKGROUNDS,
    COLORS,
    MOTIONS,
    SHAPES,
    CorpusProfile,
    SceneParams,
    VideoClip,
    attribute_block,
    caption_of,
    extract_attributes,
    generate_corpus,
    load_clip,
    load_depth,
    load_manifest,
    one_hot_attributes,
    parse_caption,
    render_clip,
    sprite_mask_of_frame,
)
from storysynth.errors import ParameterError


def argmax_names(vec):
    out = {}
    for block, names in ATTR_BLOCKS:
        blk = attribute_block(vec, block)
        out[block] = names[int(np.argmax(blk))] if blk.max() > 0 else None
    return out


class TestSceneParams:
    def test_invalid_enum_raises(self):
        with pytest.raises(ParameterError):
            SceneParams("hexagon", "red", "left", "black")
        with pytest.raises(ParameterError):
            SceneParams("circle", "pink", "left", "black")

    def test_scale_out_of_range(self):
        with pytest.raises(ParameterError):
            SceneParams("circle", "red", "left", "black", sprite_scale=0.7)
        with pytest.raises(ParameterError):
            SceneParams("circle", "red", "left", "black", sprite_scale=0.2)


class TestRenderClip:
    def test_static_frames_identical(self):
        scene = SceneParams("circle", "red", "static", "black", seed=7)
        clip, depth = render_clip(scene, length=8)
        for i in range(1, 8):
            assert np.array_equal(clip.frames[i], clip.frames[0])
            assert np.array_equal(depth.maps[i], depth.maps[0])

    def test_right_motion_centroid_strictly_increases(self):
        scene = SceneParams("square", "blue", "right", "white", seed=0)
        clip, _ = render_clip(scene, length=16)
        xs = []
        for frame in clip.frames:
            mask = sprite_mask_of_frame(frame.astype(np.float64))
            xs.append(np.nonzero(mask)[1].mean())
        assert all(b > a for a, b in zip(xs, xs[1:]))

    @pytest.mark.parametrize("shape", SHAPES)
    @pytest.mark.parametrize("background", BACKGROUNDS)
    def test_depth_matches_sprite_mask_exactly(self, shape, background):
        scene = SceneParams(shape, "green", "diagonal", background, seed=3)
        clip, depth = render_clip(scene, length=8)
        for i in range(8):
            sprite = sprite_mask_of_frame(clip.frames[i].astype(np.float64))
            d = depth.maps[i, 0] > 0.5
            union = np.logical_or(sprite, d).sum()
            assert np.logical_and(sprite, d).sum() == union

    def test_gradient_background_far_plane(self):
        _, depth = render_clip(SceneParams("circle", "red", "static", "gradient", seed=1), length=2)
        off_sprite = depth.maps[0, 0][depth.maps[0, 0] < 0.5]
        assert np.allclose(off_sprite, 0.2)

    def test_determinism_bitwise(self):
        scene = SceneParams("star", "purple", "bounce", "gradient", seed=42)
        a_clip, a_depth = render_clip(scene, length=16)
        b_clip, b_depth = render_clip(scene, length=16)
        assert np.array_equal(a_clip.frames, b_clip.frames)
        assert np.array_equal(a_depth.maps, b_depth.maps)

    def test_length_zero_rejected(self):
        with pytest.raises(ParameterError):
            render_clip(SceneParams("circle", "red", "left", "black"), length=0)

    def test_values_in_unit_range(self):
        clip, depth = render_clip(SceneParams("triangle", "yellow", "up", "gradient", seed=2), length=4)
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0
        assert depth.maps.min() >= 0.0 and depth.maps.max() <= 1.0


class TestCaptions:
    def test_template_examples(self):
        assert caption_of(SceneParams("circle", "red", "right", "black")) == \
            "a red circle moves right on a black background"
        assert caption_of(SceneParams("star", "purple", "static", "gray")) == \
            "a purple star stays still on a gray background"

    def test_round_trip_all_combinations(self):
        for shape in SHAPES:
            for color in COLORS:
                for motion in MOTIONS:
                    for background in BACKGROUNDS:
                        scene = SceneParams(shape, color, motion, background)
                        vec = parse_caption(caption_of(scene))
                        expected = one_hot_attributes(shape, color, motion, background)
                        assert np.array_equal(vec, expected), caption_of(scene)

    def test_parse_basic(self):
        vec = parse_caption("a red circle moves right on a black background")
        assert np.array_equal(vec, one_hot_attributes("circle", "red", "right", "black"))

    def test_parse_synonyms(self):
        vec = parse_caption("a crimson circle moves right on a black background")
        assert np.array_equal(vec, one_hot_attributes("circle", "red", "right", "black"))

    def test_parse_missing_blocks_zero(self):
        vec = parse_caption("a circle on a black background")
        assert attribute_block(vec, "color").sum() == 0
        assert attribute_block(vec, "motion").sum() == 0
        assert attribute_block(vec, "shape")[SHAPES.index("circle")] == 1.0

    def test_parse_empty_raises(self):
        with pytest.raises(ParameterError):
            parse_caption("   ")


class TestExtractAttributes:
    def test_oracle_matches_scene_attributes(self):
        # Sampled slice of the cross product; the full 560-combo sweep runs in
        # the acceptance suite against a generated corpus.
        rng = np.random.default_rng(0)
        for trial in range(60):
            scene = SceneParams(
                SHAPES[rng.integers(4)], COLORS[rng.integers(5)],
                MOTIONS[rng.integers(7)], BACKGROUNDS[rng.integers(4)],
                sprite_scale=float(rng.choice([0.28, 0.34, 0.4])), seed=trial,
            )
            clip, _ = render_clip(scene, length=16)
            got = argmax_names(extract_attributes(clip))
            assert got == {"shape": scene.shape, "color": scene.color,
                           "motion": scene.motion, "background": scene.background}

    def test_clean_render_gives_exact_one_hots(self):
        scene = SceneParams("triangle", "blue", "left", "white", seed=9)
        clip, _ = render_clip(scene, length=16)
        vec = extract_attributes(clip)
        assert np.array_equal(vec, one_hot_attributes("triangle", "blue", "left", "white"))

    def test_noise_clip_has_no_confident_block(self):
        # Frozen from the noise-floor oracle: max block score over 100 noise
        # clips was 0.028, far under the 0.5 bar.
        for trial in range(20):
            rng = np.random.default_rng(1000 + trial)
            clip = VideoClip(frames=rng.random((8, 3, 32, 32)).astype(np.float32))
            assert extract_attributes(clip).max() < 0.5

    def test_all_black_clip(self):
        vec = extract_attributes(VideoClip(frames=np.zeros((4, 3, 32, 32), np.float32)))
        assert attribute_block(vec, "background")[BACKGROUNDS.index("black")] == 1.0
        for block in ("shape", "color", "motion"):
            assert attribute_block(vec, block).max() < 0.05

    def test_left_motion_argmax(self):
        clip, _ = render_clip(SceneParams("circle", "green", "left", "gray", seed=4), length=16)
        motion = attribute_block(extract_attributes(clip), "motion")
        assert MOTIONS[int(np.argmax(motion))] == "left"


class TestGenerateCorpus:
    def test_deterministic_manifest(self, tmp_path):
        profile = CorpusProfile(length=8)
        m1 = generate_corpus(4, profile, seed=1, out_dir=tmp_path / "a")
        m2 = generate_corpus(4, profile, seed=1, out_dir=tmp_path / "b")
        assert m1.read_bytes() == m2.read_bytes()

    def test_full_cross_product_without_replacement(self, tmp_path):
        profile = CorpusProfile(length=1)
        generate_corpus(560, profile, seed=2, out_dir=tmp_path / "c")
        records = load_manifest(tmp_path / "c")
        combos = {(r["scene_params"]["shape"], r["scene_params"]["color"],
                   r["scene_params"]["motion"], r["scene_params"]["background"]) for r in records}
        assert len(records) == 560
        assert len(combos) == 560

    def test_files_exist_and_round_trip(self, tmp_path):
        profile = CorpusProfile(length=4)
        generate_corpus(6, profile, seed=3, out_dir=tmp_path / "d")
        records = load_manifest(tmp_path / "d")
        assert len(records) == 6
        for rec in records:
            clip = load_clip(tmp_path / "d", rec["clip_id"], caption=rec["caption"])
            depth = load_depth(tmp_path / "d", rec["clip_id"])
            assert clip.frames.shape == (4, 3, 32, 32)
            assert depth.maps.shape == (4, 1, 32, 32)
            # 16-bit depth decode: quantization error bounded by 1/65535
            scene = SceneParams(**rec["scene_params"])
            _, exact = render_clip(scene, length=4)
            assert np.abs(depth.maps - exact.maps).max() <= 1.0 / 65535

    def test_n_zero_rejected(self, tmp_path):
        with pytest.raises(ParameterError):
            generate_corpus(0, CorpusProfile(), seed=0, out_dir=tmp_path)


@given(st.sampled_from(SHAPES), st.sampled_from(COLORS), st.sampled_from(MOTIONS),
       st.sampled_from(BACKGROUNDS))
@settings(max_examples=25, deadline=None)
def test_caption_round_trip_property(shape, color, motion, background):
    vec = parse_caption(caption_of(SceneParams(shape, color, motion, background)))
    assert np.array_equal(vec, one_hot_attributes(shape, color, motion, background))
