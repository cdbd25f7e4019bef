"""
Alignment Service - codebook alignment adapter: querying, stage-1 training, diagnostics
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from app.models.alignment import Codebook, LatentAlignmentAdapter
from app.schemas.training import AdapterConfig, OptimizerConfig, Stage1Schedule
from app.utils.checksum import parameter_checksum
from app.utils.container import arrays_to_module, module_to_arrays
from app.utils.errors import ContainerError, FrozenContractError, ShapeMismatchError
from app.utils.seeding import seed_torch, torch_generator
from app.utils.training import batch_indices, check_finite, make_optimizer, progress

logger = logging.getLogger(__name__)


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.ndim == 3 else x


class AlignmentService:
    """
    Latent Alignment Adapter operations.

    Key Features:
    - Per-position nearest-neighbour quantization with lowest-index ties
    - Straight-through gradients plus a β-weighted commitment term
    - Stage-1 training that leaves the codec untouched (checksum-verified)
    - Gap statistics and codebook usage for the latent diagnostics
    """

    # Below this fraction of used entries the codebook is reported as dead
    MIN_UTILIZATION = 0.05
    GAP_PERCENTILE = 90
    META_PREFIX = "meta."
    WEIGHT_PREFIX = "adapter."

    @staticmethod
    def build(config: AdapterConfig, latent_channels: int, seed: int = 0) -> LatentAlignmentAdapter:
        seed_torch(seed, "init", "adapter")
        return LatentAlignmentAdapter(
            latent_channels=latent_channels,
            codebook_size=config.codebook_size,
            code_dim=config.code_dim,
            hidden_channels=config.hidden_channels,
        )

    # ============================================
    # Adapter operations
    # ============================================

    @staticmethod
    def extract_features(z: torch.Tensor, adapter: LatentAlignmentAdapter) -> torch.Tensor:
        return adapter.extract_features(_batched(z))

    @staticmethod
    def nearest_code(f: torch.Tensor, codebook: Codebook, record: bool = True) -> Tuple[int, torch.Tensor]:
        """(index, entry) of the entry closest to a single d-vector"""
        f = torch.as_tensor(f)
        if f.ndim != 1:
            raise ShapeMismatchError(f"Expected a d-vector, got shape {tuple(f.shape)}")
        index = int(codebook.nearest(f.unsqueeze(0), record=record)[0])
        return index, codebook.weight[index]

    @staticmethod
    def quantize_map(features: torch.Tensor, codebook: Codebook, record: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
        return codebook.quantize(_batched(features), record=record)

    @staticmethod
    def map_to_latent(quantized: torch.Tensor, adapter: LatentAlignmentAdapter) -> torch.Tensor:
        return adapter.map_to_latent(_batched(quantized))

    @staticmethod
    def align(z_lq: torch.Tensor, adapter: LatentAlignmentAdapter, record: bool = False) -> torch.Tensor:
        """extract_features → quantize_map → map_to_latent"""
        return adapter(_batched(z_lq), record=record).aligned

    @staticmethod
    def alignment_loss(
        z_aligned: torch.Tensor,
        z_hq: torch.Tensor,
        features: torch.Tensor,
        quantized: torch.Tensor,
        beta: float = 0.25,
    ) -> torch.Tensor:
        """mean|z_aligned − z_hq| + β · mean(features − sg(quantized))²"""
        if z_aligned.shape != z_hq.shape:
            raise ShapeMismatchError(f"Latent shapes differ: {tuple(z_aligned.shape)} vs {tuple(z_hq.shape)}")
        if features.shape != quantized.shape:
            raise ShapeMismatchError(f"Feature shapes differ: {tuple(features.shape)} vs {tuple(quantized.shape)}")
        loss = F.l1_loss(z_aligned, z_hq)
        return loss + beta * F.mse_loss(features, quantized.detach())

    # ============================================
    # Stage 1
    # ============================================

    @staticmethod
    def train_stage1(
        z_lq: torch.Tensor,
        z_hq: torch.Tensor,
        adapter: LatentAlignmentAdapter,
        schedule: Stage1Schedule,
        config: AdapterConfig,
        optim: Optional[OptimizerConfig] = None,
        seed: int = 0,
        codec: Optional[torch.nn.Module] = None,
    ) -> Tuple[LatentAlignmentAdapter, List[Dict]]:
        """
        Train the adapter on (z_LQ, z_HQ) pairs under the alignment loss.

        Args:
            z_lq, z_hq: N×C_z×h×w latent batches
            adapter: Adapter to train in place
            schedule: Stage-1 schedule
            config: Adapter settings (commitment weight β)
            codec: When given, its checksum must be unchanged afterwards

        Returns:
            (trained adapter, per-epoch trace)
        """
        if z_lq.shape != z_hq.shape:
            raise ShapeMismatchError(f"Latent shapes differ: {tuple(z_lq.shape)} vs {tuple(z_hq.shape)}")
        if len(z_lq) < 1:
            raise ShapeMismatchError("Stage 1 needs at least one latent pair")
        optim = optim or OptimizerConfig()
        run_seed = schedule.seed if schedule.seed is not None else seed
        codec_checksum = parameter_checksum(codec) if codec is not None else None

        optimizer = make_optimizer(adapter.parameters(), schedule.learning_rate, optim)
        generator = torch_generator(run_seed, "batch_order", "stage1")
        beta = config.commitment_weight

        logger.info(f"🚀 Stage 1: {len(z_lq)} latent pairs, {schedule.epochs} epochs, K={adapter.codebook.size}")
        trace: List[Dict] = []
        adapter.train()
        adapter.codebook.reset_usage()
        for epoch in progress(range(schedule.epochs), desc="stage1"):
            total = 0.0
            for idx in batch_indices(len(z_lq), schedule.batch_size, generator):
                out = adapter(z_lq[idx])
                loss = AlignmentService.alignment_loss(out.aligned, z_hq[idx], out.features, out.quantized, beta)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
            epoch_loss = total / len(z_lq)
            trace.append({"epoch": epoch + 1, "loss": epoch_loss})
            check_finite(epoch_loss, trace, "stage 1")
            logger.info(f"stage1 epoch {epoch + 1}/{schedule.epochs}: loss={epoch_loss:.6f}")
        adapter.eval()

        if codec is not None and parameter_checksum(codec) != codec_checksum:
            raise FrozenContractError("Codec parameters changed during stage 1")
        return adapter, trace

    @staticmethod
    def freeze(adapter: LatentAlignmentAdapter) -> LatentAlignmentAdapter:
        adapter.eval()
        adapter.requires_grad_(False)
        return adapter

    # ============================================
    # Diagnostics
    # ============================================

    @staticmethod
    def per_sample_l1(a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
        return (a - b).abs().flatten(1).mean(dim=1).detach().double().numpy()

    @staticmethod
    def alignment_gaps(z_lq: torch.Tensor, z_hq: torch.Tensor, adapter: LatentAlignmentAdapter) -> Dict[str, np.ndarray]:
        """Per-sample mean L1 of LQ→HQ and aligned→HQ"""
        with torch.no_grad():
            aligned = adapter(z_lq, record=False).aligned
        return {
            "lq_to_hq": AlignmentService.per_sample_l1(z_lq, z_hq),
            "aligned_to_hq": AlignmentService.per_sample_l1(aligned, z_hq),
        }

    @staticmethod
    def gap_statistics(values: Sequence[float]) -> Dict[str, float]:
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            return {"mean": float("nan"), "median": float("nan"), f"p{AlignmentService.GAP_PERCENTILE}": float("nan")}
        return {
            "mean": float(values.mean()),
            "median": float(np.median(values)),
            f"p{AlignmentService.GAP_PERCENTILE}": float(np.percentile(values, AlignmentService.GAP_PERCENTILE)),
        }

    @staticmethod
    def codebook_usage(adapter: LatentAlignmentAdapter, z: torch.Tensor) -> np.ndarray:
        """Reset the counters, quantize every position of z once, return the counts"""
        adapter.codebook.reset_usage()
        with torch.no_grad():
            adapter.codebook.quantize(adapter.extract_features(z), record=True)
        return adapter.codebook.usage_counts.numpy().copy()

    @staticmethod
    def usage_table(counts: np.ndarray) -> pd.DataFrame:
        return pd.DataFrame({"index": np.arange(len(counts), dtype=np.int64), "count": np.asarray(counts, dtype=np.int64)})

    @staticmethod
    def utilization(counts: np.ndarray) -> float:
        """Fraction of entries used at least once; warns when the codebook is mostly dead"""
        counts = np.asarray(counts)
        fraction = float((counts > 0).mean()) if counts.size else 0.0
        if fraction < AlignmentService.MIN_UTILIZATION:
            logger.warning(
                f"⚠️ Dead codebook: only {fraction:.1%} of {counts.size} entries are used "
                f"(threshold {AlignmentService.MIN_UTILIZATION:.0%})"
            )
        return fraction

    # ============================================
    # Checkpoint
    # ============================================

    @staticmethod
    def to_arrays(adapter: LatentAlignmentAdapter) -> Dict[str, np.ndarray]:
        hidden = adapter.extractor[0].out_channels
        arrays = {
            f"{AlignmentService.META_PREFIX}latent_channels": np.array([adapter.latent_channels], dtype=np.int64),
            f"{AlignmentService.META_PREFIX}codebook_size": np.array([adapter.codebook.size], dtype=np.int64),
            f"{AlignmentService.META_PREFIX}code_dim": np.array([adapter.code_dim], dtype=np.int64),
            f"{AlignmentService.META_PREFIX}hidden_channels": np.array([hidden], dtype=np.int64),
        }
        arrays.update(module_to_arrays(adapter, prefix=AlignmentService.WEIGHT_PREFIX))
        return arrays

    @staticmethod
    def from_arrays(arrays: Dict[str, np.ndarray]) -> LatentAlignmentAdapter:
        meta = AlignmentService.META_PREFIX
        try:
            adapter = LatentAlignmentAdapter(
                latent_channels=int(arrays[f"{meta}latent_channels"][0]),
                codebook_size=int(arrays[f"{meta}codebook_size"][0]),
                code_dim=int(arrays[f"{meta}code_dim"][0]),
                hidden_channels=int(arrays[f"{meta}hidden_channels"][0]),
            )
        except KeyError as exc:
            raise ContainerError(f"Adapter checkpoint lacks {exc.args[0]}")
        arrays_to_module(adapter, arrays, prefix=AlignmentService.WEIGHT_PREFIX)
        return adapter
