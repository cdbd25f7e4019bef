"""
Finetune Service - one-step restorer prior, LoRA attachment, pruning and stage-2 training
"""
import copy
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from app.models.alignment import LatentAlignmentAdapter
from app.models.codec import ToyCodec
from app.models.embedders import LossProviders
from app.models.lora import inject_lora, lora_parameters, lora_state, select_layers, wrap_layer
from app.models.restorer import PrecomputedConditioning, ToyRestorer
from app.schemas.loss import LossWeights
from app.schemas.training import LoRAConfig, OptimizerConfig, PriorConfig, Stage2Schedule
from app.services.loss_service import LossService
from app.utils.checksum import named_tensor_checksum, parameter_checksum
from app.utils.container import arrays_to_module, module_to_arrays
from app.utils.errors import ContainerError, EmptySelectionError, FrozenContractError, ShapeMismatchError
from app.utils.seeding import seed_torch, torch_generator
from app.utils.tensors import tensor_to_images
from app.utils.training import batch_indices, check_finite, make_optimizer, progress

logger = logging.getLogger(__name__)


class FinetuneService:
    """
    Stage-2 machinery.

    Key Features:
    - Prior: restorer pretrained to denoise HQ latents (σ ~ U[0, noise_max])
    - Conv-only selection by layer-name substring
    - LoRA (B = 0 at attach) on the selected layers, everything else frozen
    - Pruning: text/timestep modules replaced by precomputed tensors
    - Stage-2 loop: LQ → encode → align → restore → decode → total loss
    """

    META_PREFIX = "meta."
    WEIGHT_PREFIX = "restorer."
    LORA_PREFIX = "lora."

    # ============================================
    # Prior
    # ============================================

    @staticmethod
    def build_restorer(config: PriorConfig, latent_channels: int, seed: int = 0) -> ToyRestorer:
        seed_torch(seed, "init", "prior")
        return ToyRestorer(
            latent_channels=latent_channels,
            hidden_channels=config.hidden_channels,
            context_dim=config.context_dim,
            vocab_size=config.vocab_size,
            prompt=config.prompt,
        )

    @staticmethod
    def pretrain_toy_restorer(
        hq_latents: torch.Tensor,
        config: PriorConfig,
        optim: Optional[OptimizerConfig] = None,
        seed: int = 0,
    ) -> Tuple[ToyRestorer, List[Dict]]:
        """
        Train the base restorer to map noisy HQ latents back to clean ones.

        Args:
            hq_latents: N×C_z×h×w latents of HQ images
            config: Restorer shape, prompt and schedule
            seed: Global seed

        Returns:
            (frozen restorer, per-epoch trace)
        """
        if hq_latents.ndim != 4 or len(hq_latents) < 1:
            raise ShapeMismatchError(f"Expected a non-empty N×C_z×h×w latent batch, got {tuple(hq_latents.shape)}")
        optim = optim or OptimizerConfig()
        model = FinetuneService.build_restorer(config, hq_latents.shape[1], seed)
        optimizer = make_optimizer(model.parameters(), config.learning_rate, optim)
        order = torch_generator(seed, "batch_order", "prior")
        noise = torch_generator(seed, "noise", "prior")

        logger.info(f"🚀 Pretraining restorer prior on {len(hq_latents)} latents for {config.epochs} epochs")
        trace: List[Dict] = []
        model.train()
        for epoch in progress(range(config.epochs), desc="prior"):
            total = 0.0
            for idx in batch_indices(len(hq_latents), config.batch_size, order):
                clean = hq_latents[idx]
                sigma = torch.rand(len(idx), 1, 1, 1, generator=noise) * config.noise_max
                noisy = clean + sigma * torch.randn(clean.shape, generator=noise)
                loss = F.mse_loss(model(noisy), clean)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
            epoch_loss = total / len(hq_latents)
            trace.append({"epoch": epoch + 1, "loss": epoch_loss})
            check_finite(epoch_loss, trace, "prior pretraining")
            logger.info(f"prior epoch {epoch + 1}/{config.epochs}: mse={epoch_loss:.6f}")
        return FinetuneService.freeze(model), trace

    @staticmethod
    def freeze(model: torch.nn.Module) -> torch.nn.Module:
        model.eval()
        model.requires_grad_(False)
        return model

    # ============================================
    # Selection, LoRA, pruning
    # ============================================

    @staticmethod
    def select_trainable(model: torch.nn.Module, name_substring: str = "conv") -> List[str]:
        """Freeze every parameter and return the layers whose names contain the substring"""
        model.requires_grad_(False)
        return select_layers(model, name_substring)

    @staticmethod
    def attach_lora(layer: torch.nn.Module, rank: int = 4, alpha: Optional[float] = None):
        """Wrap one Conv2d/Linear layer; alpha defaults to rank"""
        return wrap_layer(layer, rank, float(alpha) if alpha is not None else float(rank))

    @staticmethod
    def precompute_conditioning(model: ToyRestorer, prompt: Optional[str] = None) -> PrecomputedConditioning:
        if prompt is not None:
            model.prompt = prompt
        conditioning = model.precompute()
        logger.info(f"Precomputed conditioning for prompt '{conditioning.prompt_text}' (checksum {conditioning.checksum:016x})")
        return conditioning

    @staticmethod
    def prune(model: ToyRestorer, conditioning: PrecomputedConditioning) -> ToyRestorer:
        before = FinetuneService.parameter_counts(model)["total"]
        model.prune(conditioning)
        after = FinetuneService.parameter_counts(model)["total"]
        logger.info(f"✂️ Pruned text/timestep modules: {before} → {after} parameters")
        return model

    @staticmethod
    def parameter_counts(model: torch.nn.Module) -> Dict[str, int]:
        params = list(model.parameters())
        return {
            "trainable": sum(p.numel() for p in params if p.requires_grad),
            "total": sum(p.numel() for p in params),
        }

    @staticmethod
    def prepare_model(
        base: ToyRestorer,
        lora: LoRAConfig,
        prune: bool = True,
        seed: int = 0,
    ) -> Tuple[ToyRestorer, PrecomputedConditioning, List[str]]:
        """
        Copy the frozen prior, optionally prune it, and attach LoRA to the selected layers.

        Returns:
            (adapted model, its conditioning tensors, adapted layer names)
        """
        model = copy.deepcopy(base)
        conditioning = FinetuneService.precompute_conditioning(model)
        if prune:
            FinetuneService.prune(model, conditioning)
        names = FinetuneService.select_trainable(model, lora.target)
        seed_torch(seed, "init", "lora")
        inject_lora(model, names, lora.rank, lora.effective_alpha)
        counts = FinetuneService.parameter_counts(model)
        logger.info(
            f"LoRA rank={lora.rank} on {len(names)} layers matching '{lora.target}': "
            f"{counts['trainable']} trainable / {counts['total']} total parameters"
        )
        return model, conditioning, names

    # ============================================
    # Pipeline
    # ============================================

    @staticmethod
    def latent_input(
        lq_up: torch.Tensor,
        codec: ToyCodec,
        adapter: Optional[LatentAlignmentAdapter],
        align: bool = True,
    ) -> torch.Tensor:
        """Upsampled LQ images → latent fed to the restorer (aligned unless align=False)"""
        with torch.no_grad():
            z = codec.encode(lq_up)
            if align and adapter is not None:
                z = adapter(z, record=False).aligned
        return z

    @staticmethod
    def restore(z_aligned: torch.Tensor, model: ToyRestorer, codec: ToyCodec) -> List[np.ndarray]:
        """One restorer pass, decoded to H×W×C images in [0, 1]"""
        z = z_aligned.unsqueeze(0) if z_aligned.ndim == 3 else z_aligned
        with torch.no_grad():
            return tensor_to_images(codec.decode(model(z)))

    @staticmethod
    def frozen_checksums(model: torch.nn.Module, codec: ToyCodec, adapter: Optional[LatentAlignmentAdapter]) -> Dict[str, int]:
        checksums = {
            "base": named_tensor_checksum(
                (name, p) for name, p in model.named_parameters() if "lora_" not in name
            ),
            "codec": parameter_checksum(codec),
        }
        if adapter is not None:
            checksums["adapter"] = parameter_checksum(adapter)
        return checksums

    @staticmethod
    def train_stage2(
        lq_up: torch.Tensor,
        hq: torch.Tensor,
        model: ToyRestorer,
        codec: ToyCodec,
        adapter: Optional[LatentAlignmentAdapter],
        weights: LossWeights,
        providers: LossProviders,
        schedule: Stage2Schedule,
        optim: Optional[OptimizerConfig] = None,
        seed: int = 0,
    ) -> Tuple[ToyRestorer, List[Dict]]:
        """
        Fine-tune the LoRA adapters under the total loss.

        Args:
            lq_up: N×C×H×W upsampled LQ images
            hq: N×C×H×W HQ targets
            model: Restorer with LoRA attached (see prepare_model)
            codec, adapter: Frozen; the adapter is skipped when schedule.align is False

        Returns:
            (model, per-step trace with step, L_res, L_id, L_fs, total)

        Raises:
            EmptySelectionError: the model has no LoRA parameters
            TrainingDivergenceError: NaN/Inf loss
            FrozenContractError: a frozen checksum changed
        """
        if lq_up.shape != hq.shape:
            raise ShapeMismatchError(f"LQ and HQ batches differ: {tuple(lq_up.shape)} vs {tuple(hq.shape)}")
        params = lora_parameters(model)
        if not params:
            raise EmptySelectionError("No LoRA parameters attached; nothing to train")
        for p in params:
            p.requires_grad_(True)
        optim = optim or OptimizerConfig()
        run_seed = schedule.seed if schedule.seed is not None else seed
        before = FinetuneService.frozen_checksums(model, codec, adapter)

        optimizer = make_optimizer(params, schedule.learning_rate, optim)
        generator = torch_generator(run_seed, "batch_order", "stage2")
        latents = FinetuneService.latent_input(lq_up, codec, adapter, align=schedule.align)

        logger.info(
            f"🚀 Stage 2: {len(hq)} pairs, {schedule.total_steps} steps, batch {schedule.batch_size}, "
            f"align={'on' if schedule.align else 'off'}"
        )
        trace: List[Dict] = []
        model.train()
        batches = iter(())
        for step in progress(range(1, schedule.total_steps + 1), desc="stage2", total=schedule.total_steps):
            idx = next(batches, None)
            if idx is None:
                batches = batch_indices(len(hq), schedule.batch_size, generator)
                idx = next(batches)
            restored = codec.decode(model(latents[idx]))
            loss, breakdown = LossService.total_loss(restored, hq[idx], weights, providers)
            record = {"step": step, **breakdown}
            trace.append(record)
            check_finite(breakdown["total"], trace, "stage 2")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if step % schedule.log_every == 0 or step == schedule.total_steps:
                logger.info(
                    f"stage2 step {step}/{schedule.total_steps}: total={breakdown['total']:.5f} "
                    f"L_res={breakdown['L_res']:.5f} L_id={breakdown['L_id']:.5f} L_fs={breakdown['L_fs']:.5f}"
                )
        model.eval()

        after = FinetuneService.frozen_checksums(model, codec, adapter)
        changed = [name for name in before if before[name] != after[name]]
        if changed:
            raise FrozenContractError(f"Frozen parameters changed during stage 2: {', '.join(changed)}")
        return model, trace

    # ============================================
    # Checkpoints
    # ============================================

    @staticmethod
    def prior_to_arrays(model: ToyRestorer) -> Dict[str, np.ndarray]:
        meta = FinetuneService.META_PREFIX
        arrays = {
            f"{meta}latent_channels": np.array([model.latent_channels], dtype=np.int64),
            f"{meta}hidden_channels": np.array([model.conv_in.out_channels], dtype=np.int64),
            f"{meta}context_dim": np.array([model.text_encoder.proj.in_features], dtype=np.int64),
            f"{meta}vocab_size": np.array([model.text_encoder.vocab_size], dtype=np.int64),
            f"{meta}prompt": np.frombuffer(model.prompt.encode("utf-8"), dtype=np.uint8),
        }
        arrays.update(module_to_arrays(model, prefix=FinetuneService.WEIGHT_PREFIX))
        return arrays

    @staticmethod
    def prior_from_arrays(arrays: Dict[str, np.ndarray]) -> ToyRestorer:
        meta = FinetuneService.META_PREFIX
        try:
            model = ToyRestorer(
                latent_channels=int(arrays[f"{meta}latent_channels"][0]),
                hidden_channels=int(arrays[f"{meta}hidden_channels"][0]),
                context_dim=int(arrays[f"{meta}context_dim"][0]),
                vocab_size=int(arrays[f"{meta}vocab_size"][0]),
                prompt=np.asarray(arrays[f"{meta}prompt"], dtype=np.uint8).tobytes().decode("utf-8"),
            )
        except KeyError as exc:
            raise ContainerError(f"Prior checkpoint lacks {exc.args[0]}")
        arrays_to_module(model, arrays, prefix=FinetuneService.WEIGHT_PREFIX)
        return FinetuneService.freeze(model)

    @staticmethod
    def lora_to_arrays(model: ToyRestorer, lora: LoRAConfig, pruned: bool) -> Dict[str, np.ndarray]:
        meta = FinetuneService.META_PREFIX
        arrays = {
            f"{meta}rank": np.array([lora.rank], dtype=np.int64),
            f"{meta}alpha": np.array([lora.effective_alpha], dtype=np.float32),
            f"{meta}target": np.frombuffer(lora.target.encode("utf-8"), dtype=np.uint8),
            f"{meta}pruned": np.array([int(pruned)], dtype=np.int64),
        }
        for name, tensor in lora_state(model).items():
            arrays[f"{FinetuneService.LORA_PREFIX}{name}"] = tensor.detach().cpu().numpy()
        return arrays

    @staticmethod
    def lora_from_arrays(base: ToyRestorer, arrays: Dict[str, np.ndarray]) -> Tuple[ToyRestorer, bool]:
        """Rebuild the adapted model from the prior and a stage-2 checkpoint → (model, pruned)"""
        meta = FinetuneService.META_PREFIX
        try:
            lora = LoRAConfig(
                rank=int(arrays[f"{meta}rank"][0]),
                alpha=float(arrays[f"{meta}alpha"][0]),
                target=np.asarray(arrays[f"{meta}target"], dtype=np.uint8).tobytes().decode("utf-8"),
            )
            pruned = bool(arrays[f"{meta}pruned"][0])
        except KeyError as exc:
            raise ContainerError(f"Stage-2 checkpoint lacks {exc.args[0]}")
        model, _, _ = FinetuneService.prepare_model(base, lora, prune=pruned)
        state = model.state_dict()
        prefix = FinetuneService.LORA_PREFIX
        loaded = {name[len(prefix):]: arr for name, arr in arrays.items() if name.startswith(prefix)}
        missing = [name for name in lora_state(model) if name not in loaded]
        if missing:
            raise ContainerError(f"Stage-2 checkpoint is missing adapter tensor '{missing[0]}'")
        with torch.no_grad():
            for name, arr in loaded.items():
                state[name].copy_(torch.from_numpy(np.array(arr)))
        return FinetuneService.freeze(model), pruned
