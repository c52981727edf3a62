import numpy as np
import pytest
import torch

from storysynth.codec import (
    CodecParams,
    LatentVideo,
    decode_latents,
    encode_frames,
    identity_codec,
    load_codec,
    save_codec,
    train_autoencoder,
)
from storysynth.corpus import SceneParams, render_clip
from storysynth.errors import ParameterError, ShapeError


@pytest.fixture(scope="module")
def clip16():
    return render_clip(SceneParams("circle", "blue", "right", "gray", seed=2), length=16)[0]


class TestIdentityCodec:
    def test_encode_is_exact(self, clip16):
        z = encode_frames(clip16, identity_codec())
        assert np.array_equal(z.z.numpy(), clip16.frames)

    def test_round_trip_bitwise(self, clip16):
        codec = identity_codec()
        recon = decode_latents(encode_frames(clip16, codec), codec)
        assert np.array_equal(recon.frames, clip16.frames)

    def test_invariants_enforced(self):
        with pytest.raises(ParameterError):
            CodecParams(mode="identity", factor=4, channels=4)
        with pytest.raises(ParameterError):
            CodecParams(mode="vqgan")

    def test_decode_clamps_arbitrary_latents(self):
        codec = identity_codec()
        z = LatentVideo(z=torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(0)) * 5,
                        codec_id=codec.codec_id)
        out = decode_latents(z, codec)
        assert out.frames.min() >= 0.0 and out.frames.max() <= 1.0


class TestConvCodec:
    @pytest.fixture(scope="class")
    def tiny_codec(self, clip16):
        # Single-clip overfit: enough steps to memorize.
        return train_autoencoder(clip16.frames, steps=300, batch_size=16, seed=0)

    def test_shapes(self, clip16, tiny_codec):
        z = encode_frames(clip16, tiny_codec)
        assert tuple(z.z.shape) == (16, 4, 8, 8)
        recon = decode_latents(z, tiny_codec)
        assert recon.frames.shape == clip16.frames.shape

    def test_overfit_smoke(self, tiny_codec):
        # Memorization oracle: loss collapses on a one-clip corpus.
        assert tiny_codec.stats["recon_mse"] < 1e-3

    def test_frame_permutation_equivariance(self, clip16, tiny_codec):
        perm = np.random.default_rng(0).permutation(16)
        z_then_perm = encode_frames(clip16, tiny_codec).z[perm]
        perm_then_z = encode_frames(clip16.frames[perm], tiny_codec).z
        assert torch.equal(z_then_perm, perm_then_z)

    def test_codec_mismatch_rejected(self, clip16, tiny_codec):
        z = encode_frames(clip16, tiny_codec)
        other = identity_codec()
        with pytest.raises(ParameterError):
            decode_latents(z, other)

    def test_indivisible_dims_rejected(self, tiny_codec):
        with pytest.raises(ShapeError):
            encode_frames(np.zeros((2, 3, 30, 30), np.float32), tiny_codec)

    def test_decode_range_clamped(self, tiny_codec):
        z = LatentVideo(z=torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(1)) * 10,
                        codec_id=tiny_codec.codec_id)
        out = decode_latents(z, tiny_codec)
        assert out.frames.min() >= 0.0 and out.frames.max() <= 1.0

    def test_training_determinism(self, clip16):
        a = train_autoencoder(clip16.frames, steps=40, batch_size=8, seed=5)
        b = train_autoencoder(clip16.frames, steps=40, batch_size=8, seed=5)
        assert a.stats["final_loss"] == b.stats["final_loss"]
        assert a.codec_id == b.codec_id

    def test_empty_corpus_rejected(self):
        with pytest.raises(ParameterError):
            train_autoencoder(np.zeros((0, 3, 32, 32), np.float32), steps=1)

    def test_checkpoint_round_trip(self, tiny_codec, tmp_path):
        save_codec(tiny_codec, tmp_path / "c.ckpt")
        loaded = load_codec(tmp_path / "c.ckpt")
        assert loaded.codec_id == tiny_codec.codec_id
        assert loaded.latent_scale == tiny_codec.latent_scale
        x = np.random.default_rng(2).random((2, 3, 32, 32)).astype(np.float32)
        assert torch.equal(encode_frames(x, loaded).z, encode_frames(x, tiny_codec).z)
