"""
Loss Service - multi-level restoration objective

    L_res = MSE(res, gt) + λ_lpips · perceptual(res, gt)
    L_id  = 1 − cos(F_id(res), F_id(gt))
    L_fs  = 1 − cos(F_fs(res), F_fs(gt))
    total = λ_res·L_res + λ_id·L_id + λ_fs·L_fs

The L2 variants replace 1 − cos with ‖e₁ − e₂‖², which equals 2(1 − cos)
on unit-norm embeddings.
"""
import logging
from typing import Dict, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from app.models.embedders import EmbeddingProvider, LossProviders, PerceptualDistance
from app.schemas.loss import LossWeights
from app.utils.errors import MetricError, ShapeMismatchError
from app.utils.tensors import image_to_tensor

logger = logging.getLogger(__name__)

ImageLike = Union[np.ndarray, torch.Tensor]

BREAKDOWN_COLUMNS = ("L_res", "L_id", "L_fs", "total")


class LossService:
    """Loss terms over N×C×H×W tensors (H×W×C numpy images are accepted too); each returns a scalar tensor"""

    @staticmethod
    def _batch(x: ImageLike) -> torch.Tensor:
        if isinstance(x, np.ndarray):
            return image_to_tensor(x, dtype=torch.float64 if x.dtype == np.float64 else torch.float32)
        return x.unsqueeze(0) if x.ndim == 3 else x

    @staticmethod
    def _pair(res: ImageLike, gt: ImageLike) -> Tuple[torch.Tensor, torch.Tensor]:
        res, gt = LossService._batch(res), LossService._batch(gt)
        if res.shape != gt.shape:
            raise ShapeMismatchError(f"Shapes differ: {tuple(res.shape)} vs {tuple(gt.shape)}")
        return res, gt

    @staticmethod
    def perceptual_distance(a: ImageLike, b: ImageLike, provider: PerceptualDistance) -> torch.Tensor:
        a, b = LossService._pair(a, b)
        return provider(a, b).mean()

    @staticmethod
    def reconstruction_loss(res: ImageLike, gt: ImageLike, weights: LossWeights, perceptual: PerceptualDistance) -> torch.Tensor:
        res, gt = LossService._pair(res, gt)
        loss = F.mse_loss(res, gt)
        if weights.lambda_lpips > 0:
            loss = loss + weights.lambda_lpips * LossService.perceptual_distance(res, gt, perceptual)
        return loss

    @staticmethod
    def cosine_distance(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """
        1 − cos(u, v) per row, in [0, 2].

        Computed as ½‖û − v̂‖², which is exactly 0 for identical inputs.

        Raises:
            MetricError: either vector is zero
        """
        u = u.unsqueeze(0) if u.ndim == 1 else u
        v = v.unsqueeze(0) if v.ndim == 1 else v
        if u.shape != v.shape:
            raise ShapeMismatchError(f"Vector shapes differ: {tuple(u.shape)} vs {tuple(v.shape)}")
        nu = u.norm(dim=1, keepdim=True)
        nv = v.norm(dim=1, keepdim=True)
        if bool((nu == 0).any()) or bool((nv == 0).any()):
            raise MetricError("cosine_distance is undefined for a zero vector")
        return (0.5 * (u / nu - v / nv).pow(2).sum(dim=1)).clamp(max=2.0)

    @staticmethod
    def squared_l2(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        u = u.unsqueeze(0) if u.ndim == 1 else u
        v = v.unsqueeze(0) if v.ndim == 1 else v
        return (u - v).pow(2).sum(dim=1)

    @staticmethod
    def _embedding_loss(res: ImageLike, gt: ImageLike, provider: EmbeddingProvider, variant: str) -> torch.Tensor:
        res, gt = LossService._pair(res, gt)
        e_res, e_gt = provider(res), provider(gt)
        if variant == "l2":
            return LossService.squared_l2(e_res, e_gt).mean()
        return LossService.cosine_distance(e_res, e_gt).mean()

    @staticmethod
    def identity_loss(res: ImageLike, gt: ImageLike, provider: EmbeddingProvider, variant: str = "cosine") -> torch.Tensor:
        return LossService._embedding_loss(res, gt, provider, variant)

    @staticmethod
    def structure_loss(res: ImageLike, gt: ImageLike, provider: EmbeddingProvider, variant: str = "cosine") -> torch.Tensor:
        return LossService._embedding_loss(res, gt, provider, variant)

    @staticmethod
    def total_loss(res: ImageLike, gt: ImageLike, weights: LossWeights, providers: LossProviders) -> Tuple[torch.Tensor, Dict[str, float]]:
        """
        Weighted sum of the three terms.

        Returns:
            (total as a differentiable scalar, unweighted per-term breakdown plus total)
        """
        res, gt = LossService._pair(res, gt)
        l_res = LossService.reconstruction_loss(res, gt, weights, providers.perceptual)
        l_id = LossService.identity_loss(res, gt, providers.identity, weights.id_variant)
        l_fs = LossService.structure_loss(res, gt, providers.structure, weights.fs_variant)
        total = weights.lambda_res * l_res + weights.lambda_id * l_id + weights.lambda_fs * l_fs
        breakdown = {
            "L_res": float(l_res.item()),
            "L_id": float(l_id.item()),
            "L_fs": float(l_fs.item()),
            "total": float(total.item()),
        }
        return total, breakdown
