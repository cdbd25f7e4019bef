"""
Fine-tune Engine Test Suite
===========================
LoRA adapters, layer selection, conditioning precomputation and pruning,
stage-2 training contracts and checkpoints.
"""
import copy

import pytest
import torch
import torch.nn as nn

from app.models.codec import ToyCodec
from app.models.embedders import LossProviders
from app.models.lora import LoRAConv2d, LoRALinear, inject_lora, lora_parameters, merge_lora, select_layers
from app.models.restorer import PrecomputedConditioning, ToyRestorer
from app.schemas.loss import LossWeights
from app.schemas.training import AdapterConfig, LoRAConfig, PriorConfig, Stage2Schedule
from app.services.alignment_service import AlignmentService
from app.services.codec_service import CodecService
from app.services.finetune_service import FinetuneService
from app.utils.checksum import parameter_checksum
from app.utils.container import decode_arrays, encode_arrays
from app.utils.errors import ContainerError, EmptySelectionError, LoRARankError
from app.utils.tensors import images_to_tensor

PRIOR = PriorConfig(hidden_channels=8, context_dim=8, vocab_size=32)


@pytest.fixture
def restorer():
    return FinetuneService.freeze(FinetuneService.build_restorer(PRIOR, latent_channels=4, seed=0))


@pytest.fixture
def latents():
    return torch.randn(3, 4, 4, 4, generator=torch.Generator().manual_seed(5))


# ============================================
# LoRA layers
# ============================================

class TestLoRALayers:
    def test_fresh_conv_adapter_is_identity(self):
        base = nn.Conv2d(6, 5, 3, padding=1)
        layer = FinetuneService.attach_lora(base, rank=4)
        x = torch.randn(2, 6, 7, 7)
        assert torch.equal(layer(x), base(x))

    def test_fresh_linear_adapter_is_identity(self):
        base = nn.Linear(6, 5)
        layer = FinetuneService.attach_lora(base, rank=2)
        x = torch.randn(4, 6)
        assert torch.equal(layer(x), base(x))

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
    def test_merged_conv_matches_adapter_path(self, stride, padding):
        layer = LoRAConv2d(nn.Conv2d(4, 6, 3, stride=stride, padding=padding), rank=3, alpha=6.0)
        with torch.no_grad():
            layer.lora_B.weight.normal_()
        for _ in range(100):
            x = torch.randn(1, 4, 6, 6)
            torch.testing.assert_close(layer.merged_forward(x), layer(x), rtol=1e-5, atol=1e-5)

    def test_merged_linear_matches_adapter_path(self):
        layer = LoRALinear(nn.Linear(8, 5), rank=4, alpha=2.0)
        with torch.no_grad():
            layer.lora_B.normal_()
        for _ in range(100):
            x = torch.randn(3, 8)
            torch.testing.assert_close(layer.merged_forward(x), layer(x), rtol=1e-5, atol=1e-5)

    def test_base_frozen_adapters_trainable(self):
        layer = LoRAConv2d(nn.Conv2d(4, 4, 3), rank=2)
        assert not layer.base.weight.requires_grad
        assert layer.lora_A.weight.requires_grad and layer.lora_B.weight.requires_grad

    def test_rank_too_large(self):
        with pytest.raises(LoRARankError):
            LoRALinear(nn.Linear(3, 8), rank=4)
        with pytest.raises(LoRARankError):
            LoRAConv2d(nn.Conv2d(1, 2, 1), rank=3)

    def test_rank_zero(self):
        with pytest.raises(LoRARankError):
            LoRALinear(nn.Linear(3, 3), rank=0)

    def test_merge_lora_unwraps(self, restorer, latents):
        model = FinetuneService.prepare_model(restorer, LoRAConfig(rank=2, target="conv"), prune=True)[0]
        with torch.no_grad():
            for p in lora_parameters(model):
                p.normal_(std=0.05)
            expected = model(latents)
            merge_lora(model)
            torch.testing.assert_close(model(latents), expected, rtol=1e-4, atol=1e-5)
        assert not any(isinstance(m, (LoRAConv2d, LoRALinear)) for m in model.modules())


# ============================================
# Layer selection
# ============================================

class TestSelection:
    def test_conv_selection(self, restorer):
        names = select_layers(restorer, "conv")
        assert names == ["conv_in", "conv_1a", "conv_1b", "conv_2a", "conv_2b", "conv_out"]

    def test_attn_selection(self, restorer):
        assert select_layers(restorer, "attn") == ["attn_self.qkv", "attn_cross.kv"]

    def test_empty_substring_selects_everything(self, restorer):
        names = select_layers(restorer, "")
        assert "text_encoder.proj" in names and "conv_out" in names

    def test_no_match(self, restorer):
        with pytest.raises(EmptySelectionError):
            FinetuneService.select_trainable(restorer, "does_not_exist")

    def test_select_trainable_freezes_everything(self, restorer):
        for p in restorer.parameters():
            p.requires_grad_(True)
        FinetuneService.select_trainable(restorer, "conv")
        assert all(not p.requires_grad for p in restorer.parameters())

    def test_only_lora_parameters_train(self, restorer):
        model, _, names = FinetuneService.prepare_model(restorer, LoRAConfig(rank=2, target="attn"), prune=False)
        trainable = [name for name, p in model.named_parameters() if p.requires_grad]
        assert trainable and all("lora_" in name for name in trainable)
        assert names == ["attn_self.qkv", "attn_cross.kv"]

    def test_wrapping_twice_is_refused(self, restorer):
        model = FinetuneService.prepare_model(restorer, LoRAConfig(rank=2, target="conv_out"), prune=True)[0]
        assert "conv_out" not in select_layers(model, "conv")
        inject_lora(model, select_layers(model, "conv_in"), 2, 2.0)
        assert isinstance(model.conv_in, LoRAConv2d)


# ============================================
# Conditioning and pruning
# ============================================

class TestPruning:
    def test_pruned_outputs_are_bit_identical(self, restorer, latents):
        with torch.no_grad():
            restorer.conv_out.weight.normal_(std=0.1)
        conditioning = FinetuneService.precompute_conditioning(restorer)
        pruned = FinetuneService.prune(copy.deepcopy(restorer), conditioning)
        with torch.no_grad():
            assert torch.equal(pruned(latents), restorer(latents))

    def test_pruned_has_fewer_parameters(self, restorer):
        conditioning = FinetuneService.precompute_conditioning(restorer)
        before = FinetuneService.parameter_counts(restorer)["total"]
        pruned = FinetuneService.prune(copy.deepcopy(restorer), conditioning)
        assert pruned.pruned
        assert FinetuneService.parameter_counts(pruned)["total"] < before

    def test_conditioning_is_read_only(self, restorer):
        conditioning = FinetuneService.precompute_conditioning(restorer)
        assert conditioning.prompt_embedding.shape == (3, 8)
        with pytest.raises(ValueError):
            conditioning.prompt_embedding[0, 0] = 1.0

    def test_conditioning_round_trip(self, restorer):
        conditioning = FinetuneService.precompute_conditioning(restorer)
        loaded = PrecomputedConditioning.from_arrays(decode_arrays(encode_arrays(conditioning.to_arrays())))
        assert loaded.checksum == conditioning.checksum
        assert loaded.prompt_text == "face, high quality"

    def test_tampered_conditioning_rejected(self, restorer):
        arrays = FinetuneService.precompute_conditioning(restorer).to_arrays()
        arrays["timestep_embedding"] = arrays["timestep_embedding"] + 1.0
        with pytest.raises(ContainerError):
            PrecomputedConditioning.from_arrays(arrays)

    def test_prompt_changes_output(self, restorer, latents):
        other = copy.deepcopy(restorer)
        with torch.no_grad():
            other.conv_out.weight.normal_(std=0.1)
            a = other(latents)
            FinetuneService.precompute_conditioning(other, prompt="blurry cartoon")
            b = other(latents)
        assert not torch.equal(a, b)

    def test_fresh_prior_is_identity(self, restorer, latents):
        with torch.no_grad():
            assert torch.equal(restorer(latents), latents)


# ============================================
# Stage 2
# ============================================

class TestStageTwo:
    @pytest.fixture
    def setup(self, toy_faces):
        torch.manual_seed(0)
        codec = CodecService.freeze(ToyCodec(hidden_widths=(8, 16, 16)))
        adapter = AlignmentService.freeze(
            AlignmentService.build(AdapterConfig(codebook_size=8, code_dim=4, hidden_channels=4), 4, seed=0)
        )
        hq = images_to_tensor(toy_faces[:4])
        lq_up = (hq * 0.8 + 0.1).clamp(0, 1)
        return codec, adapter, hq, lq_up

    def test_frozen_contracts_hold(self, setup, restorer):
        codec, adapter, hq, lq_up = setup
        model, _, _ = FinetuneService.prepare_model(restorer, LoRAConfig(rank=2), prune=True, seed=0)
        prior_checksum = parameter_checksum(restorer)
        codec_checksum = parameter_checksum(codec)
        adapter_checksum = parameter_checksum(adapter)
        lora_before = [p.detach().clone() for p in lora_parameters(model)]

        schedule = Stage2Schedule(total_steps=3, batch_size=2, learning_rate=1e-2, log_every=1)
        model, trace = FinetuneService.train_stage2(
            lq_up, hq, model, codec, adapter, LossWeights(), LossProviders(0), schedule, seed=0
        )
        assert [row["step"] for row in trace] == [1, 2, 3]
        assert set(trace[0]) == {"step", "L_res", "L_id", "L_fs", "total"}
        assert parameter_checksum(restorer) == prior_checksum
        assert parameter_checksum(codec) == codec_checksum
        assert parameter_checksum(adapter) == adapter_checksum
        assert any(not torch.equal(a, b) for a, b in zip(lora_before, lora_parameters(model)))

    def test_deterministic(self, setup, restorer):
        codec, adapter, hq, lq_up = setup
        schedule = Stage2Schedule(total_steps=2, batch_size=2, log_every=1)
        traces = []
        for _ in range(2):
            model, _, _ = FinetuneService.prepare_model(restorer, LoRAConfig(rank=2), prune=True, seed=4)
            _, trace = FinetuneService.train_stage2(
                lq_up, hq, model, codec, adapter, LossWeights(), LossProviders(0), schedule, seed=4
            )
            traces.append(trace)
        assert traces[0] == traces[1]

    def test_align_off_skips_adapter(self, setup):
        codec, adapter, hq, lq_up = setup
        with_adapter = FinetuneService.latent_input(lq_up, codec, adapter, align=True)
        without = FinetuneService.latent_input(lq_up, codec, adapter, align=False)
        assert torch.equal(without, codec.encode(lq_up))
        assert with_adapter.shape == without.shape

    def test_restore_returns_images(self, setup, restorer):
        codec, adapter, hq, lq_up = setup
        z = FinetuneService.latent_input(lq_up, codec, adapter)
        images = FinetuneService.restore(z, restorer, codec)
        assert len(images) == 4
        assert images[0].shape == (16, 16, 3)
        assert all(img.min() >= 0.0 and img.max() <= 1.0 for img in images)

    def test_requires_lora(self, setup, restorer):
        codec, adapter, hq, lq_up = setup
        with pytest.raises(EmptySelectionError):
            FinetuneService.train_stage2(
                lq_up, hq, restorer, codec, adapter, LossWeights(), LossProviders(0), Stage2Schedule(total_steps=1)
            )


# ============================================
# Prior pretraining and checkpoints
# ============================================

class TestCheckpoints:
    def test_pretrain_deterministic(self, latents):
        config = PriorConfig(hidden_channels=8, context_dim=8, vocab_size=32, epochs=2, batch_size=2)
        a, trace_a = FinetuneService.pretrain_toy_restorer(latents, config, seed=1)
        b, trace_b = FinetuneService.pretrain_toy_restorer(latents, config, seed=1)
        assert trace_a == trace_b
        assert parameter_checksum(a) == parameter_checksum(b)

    def test_prior_round_trip(self, restorer, latents):
        with torch.no_grad():
            restorer.conv_out.weight.normal_(std=0.1)
        loaded = FinetuneService.prior_from_arrays(decode_arrays(encode_arrays(FinetuneService.prior_to_arrays(restorer))))
        with torch.no_grad():
            assert torch.equal(loaded(latents), restorer(latents))

    @pytest.mark.parametrize("prune", [True, False])
    def test_lora_round_trip(self, restorer, latents, prune):
        lora = LoRAConfig(rank=2, target="conv")
        model, _, _ = FinetuneService.prepare_model(restorer, lora, prune=prune, seed=0)
        with torch.no_grad():
            for p in lora_parameters(model):
                p.normal_(std=0.05)
        arrays = decode_arrays(encode_arrays(FinetuneService.lora_to_arrays(model, lora, pruned=prune)))
        loaded, pruned = FinetuneService.lora_from_arrays(restorer, arrays)
        assert pruned == prune
        with torch.no_grad():
            assert torch.equal(loaded(latents), model(latents))

    def test_missing_lora_tensor(self, restorer):
        lora = LoRAConfig(rank=2, target="conv")
        model, _, _ = FinetuneService.prepare_model(restorer, lora, prune=True)
        arrays = dict(FinetuneService.lora_to_arrays(model, lora, pruned=True))
        del arrays[next(name for name in arrays if name.endswith("lora_B.weight"))]
        with pytest.raises(ContainerError):
            FinetuneService.lora_from_arrays(restorer, arrays)

    def test_parameter_counts(self, restorer):
        model, _, _ = FinetuneService.prepare_model(restorer, LoRAConfig(rank=2, target="conv"), prune=True)
        counts = FinetuneService.parameter_counts(model)
        assert 0 < counts["trainable"] < counts["total"]
        assert counts["trainable"] == sum(p.numel() for p in lora_parameters(model))
