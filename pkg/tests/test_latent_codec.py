"""
Latent Codec Test Suite
=======================
Toy autoencoder shapes, training contract and checkpoint round-trip.
"""
import numpy as np
import pytest
import torch

from app.models.codec import ToyCodec
from app.schemas.training import CodecConfig
from app.services.codec_service import CodecService
from app.utils.container import decode_arrays, encode_arrays
from app.utils.errors import ManifestError, ShapeMismatchError, TrainingFailureError

SMALL = dict(hidden_widths=[8, 16, 16], epochs=2, batch_size=4, min_images=4, max_final_loss=1.0)


@pytest.fixture
def codec():
    return ToyCodec(in_channels=3, latent_channels=4, hidden_widths=(8, 16, 16))


# ============================================
# Shapes
# ============================================

class TestCodecShapes:
    def test_latent_shape(self, codec):
        """stride 4: 16×16 image → 4×4×4 latent"""
        z = codec.encode(torch.rand(2, 3, 16, 16))
        assert codec.stride == 4
        assert tuple(z.shape) == (2, 4, 4, 4)
        assert codec.latent_shape(16, 16) == (4, 4, 4)

    def test_decode_shape_and_range(self, codec):
        out = codec.decode(torch.randn(1, 4, 4, 4) * 10)
        assert tuple(out.shape) == (1, 3, 16, 16)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_indivisible_size(self, codec):
        with pytest.raises(ShapeMismatchError):
            codec.encode(torch.rand(1, 3, 18, 18))

    def test_wrong_channels(self, codec):
        with pytest.raises(ShapeMismatchError):
            codec.encode(torch.rand(1, 1, 16, 16))
        with pytest.raises(ShapeMismatchError):
            codec.decode(torch.rand(1, 3, 4, 4))

    def test_stride_must_match_widths(self):
        with pytest.raises(ValueError):
            CodecConfig(hidden_widths=[8, 16], stride=4)


# ============================================
# Training
# ============================================

class TestCodecTraining:
    def test_train_is_deterministic_and_frozen(self, toy_faces):
        config = CodecConfig(**SMALL)
        codec_a, trace_a = CodecService.train_toy_codec(toy_faces, config, seed=3)
        codec_b, trace_b = CodecService.train_toy_codec(toy_faces, config, seed=3)
        assert [row["loss"] for row in trace_a] == [row["loss"] for row in trace_b]
        assert len(trace_a) == 2
        assert not codec_a.training
        assert all(not p.requires_grad for p in codec_a.parameters())
        for pa, pb in zip(codec_a.parameters(), codec_b.parameters()):
            assert torch.equal(pa, pb)

    def test_too_few_images(self, toy_faces):
        with pytest.raises(ManifestError):
            CodecService.train_toy_codec(toy_faces[:2], CodecConfig(**SMALL))

    def test_failure_threshold(self, toy_faces):
        """A final loss above max_final_loss is a training failure carrying the trace"""
        config = CodecConfig(**{**SMALL, "max_final_loss": 1e-12})
        with pytest.raises(TrainingFailureError) as info:
            CodecService.train_toy_codec(toy_faces, config)
        assert len(info.value.trace) == 2

    def test_zero_epochs(self, toy_faces):
        codec, trace = CodecService.train_toy_codec(toy_faces, CodecConfig(**{**SMALL, "epochs": 0}))
        assert trace == []
        assert isinstance(codec, ToyCodec)


# ============================================
# Inference helpers and checkpoints
# ============================================

class TestCodecInference:
    def test_encode_decode_numpy(self, codec, toy_faces):
        CodecService.freeze(codec)
        z = CodecService.encode(codec, toy_faces[0])
        assert z.shape == (4, 4, 4)
        img = CodecService.decode(codec, z)
        assert img.shape == (16, 16, 3)
        assert img.dtype == np.float32

    def test_batch_matches_single(self, codec, toy_faces):
        CodecService.freeze(codec)
        batch = CodecService.encode_batch(codec, toy_faces[:3])
        np.testing.assert_allclose(batch[1], CodecService.encode(codec, toy_faces[1]), atol=1e-6)

    def test_roundtrip_psnr_is_finite(self, codec, toy_faces):
        CodecService.freeze(codec)
        assert np.isfinite(CodecService.roundtrip_psnr(codec, toy_faces[:2]))

    def test_checkpoint_round_trip(self, codec, toy_faces):
        """Reloaded codec reproduces the original latents bit-for-bit"""
        CodecService.freeze(codec)
        restored = CodecService.from_arrays(decode_arrays(encode_arrays(CodecService.to_arrays(codec))))
        np.testing.assert_array_equal(
            CodecService.encode(codec, toy_faces[0]), CodecService.encode(restored, toy_faces[0])
        )
        assert restored.hidden_widths == [8, 16, 16]
