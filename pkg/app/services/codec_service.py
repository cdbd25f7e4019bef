"""
Codec Service - trains, runs and stores the frozen toy latent codec
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from app.models.codec import ToyCodec
from app.schemas.training import CodecConfig, OptimizerConfig
from app.services.metrics_service import MetricsService
from app.utils.container import arrays_to_module, module_to_arrays
from app.utils.errors import ContainerError, ManifestError, ShapeMismatchError, TrainingFailureError
from app.utils.seeding import seed_torch, torch_generator
from app.utils.tensors import images_to_tensor, latents_to_tensor, tensor_to_images
from app.utils.training import batch_indices, check_finite, make_optimizer, progress

logger = logging.getLogger(__name__)


class CodecService:
    """
    Toy autoencoder standing in for a pretrained VAE.

    Trained once on HQ images, then frozen: every later stage only calls
    encode/decode under no_grad or as a fixed differentiable map.
    """

    INFERENCE_BATCH = 64
    META_PREFIX = "meta."
    WEIGHT_PREFIX = "codec."

    @staticmethod
    def build(config: CodecConfig, in_channels: int = 3) -> ToyCodec:
        return ToyCodec(in_channels=in_channels, latent_channels=config.latent_channels, hidden_widths=config.hidden_widths)

    @staticmethod
    def train_toy_codec(
        hq_images: Sequence[np.ndarray],
        config: CodecConfig,
        optim: Optional[OptimizerConfig] = None,
        seed: int = 0,
    ) -> Tuple[ToyCodec, List[Dict]]:
        """
        Fit the codec to HQ images with a pixel MSE objective.

        Args:
            hq_images: Training images (at least config.min_images)
            config: Architecture and schedule
            optim: Adam settings
            seed: Global seed (used when config.seed is unset)

        Returns:
            (frozen codec in eval mode, per-epoch loss trace)

        Raises:
            TrainingDivergenceError: loss became NaN/Inf
            TrainingFailureError: final loss above config.max_final_loss
        """
        if len(hq_images) < config.min_images:
            raise ManifestError(f"Codec training needs at least {config.min_images} images, got {len(hq_images)}")
        optim = optim or OptimizerConfig()
        run_seed = config.seed if config.seed is not None else seed

        seed_torch(run_seed, "init", "codec")
        codec = CodecService.build(config, in_channels=hq_images[0].shape[2])
        data = images_to_tensor(hq_images)
        optimizer = make_optimizer(codec.parameters(), config.learning_rate, optim)
        generator = torch_generator(run_seed, "batch_order", "codec")

        logger.info(f"🚀 Training toy codec on {len(data)} images for {config.epochs} epochs (stride {codec.stride})")
        trace: List[Dict] = []
        codec.train()
        for epoch in progress(range(config.epochs), desc="codec"):
            total = 0.0
            for idx in batch_indices(len(data), config.batch_size, generator):
                batch = data[idx]
                loss = F.mse_loss(codec(batch), batch)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
            epoch_loss = total / len(data)
            trace.append({"epoch": epoch + 1, "loss": epoch_loss})
            check_finite(epoch_loss, trace, "codec training")
            logger.info(f"codec epoch {epoch + 1}/{config.epochs}: mse={epoch_loss:.6f}")

        if trace and trace[-1]["loss"] > config.max_final_loss:
            logger.error(f"❌ Codec did not converge: final mse {trace[-1]['loss']:.6f} > {config.max_final_loss}")
            raise TrainingFailureError(
                f"Codec final loss {trace[-1]['loss']:.6f} exceeds {config.max_final_loss}", trace=trace
            )
        CodecService.freeze(codec)
        return codec, trace

    @staticmethod
    def freeze(codec: ToyCodec) -> ToyCodec:
        codec.eval()
        codec.requires_grad_(False)
        return codec

    # ============================================
    # Inference
    # ============================================

    @staticmethod
    def encode(codec: ToyCodec, img: np.ndarray) -> np.ndarray:
        """One H×W×C image → C_z×(H/stride)×(W/stride) latent"""
        return CodecService.encode_batch(codec, [img])[0]

    @staticmethod
    def decode(codec: ToyCodec, z: np.ndarray) -> np.ndarray:
        """One latent → H×W×C image in [0, 1]"""
        return CodecService.decode_batch(codec, [z])[0]

    @staticmethod
    def encode_batch(codec: ToyCodec, images: Sequence[np.ndarray]) -> List[np.ndarray]:
        if not images:
            return []
        latents = []
        with torch.no_grad():
            for start in range(0, len(images), CodecService.INFERENCE_BATCH):
                batch = images_to_tensor(images[start:start + CodecService.INFERENCE_BATCH])
                latents.extend(codec.encode(batch).numpy())
        return [np.ascontiguousarray(z) for z in latents]

    @staticmethod
    def decode_batch(codec: ToyCodec, latents: Sequence[np.ndarray]) -> List[np.ndarray]:
        if not latents:
            return []
        for z in latents:
            if z.ndim != 3:
                raise ShapeMismatchError(f"Expected C_z×h×w latents, got shape {z.shape}")
        images = []
        with torch.no_grad():
            for start in range(0, len(latents), CodecService.INFERENCE_BATCH):
                batch = latents_to_tensor(latents[start:start + CodecService.INFERENCE_BATCH])
                images.extend(tensor_to_images(codec.decode(batch)))
        return images

    @staticmethod
    def roundtrip_psnr(codec: ToyCodec, images: Sequence[np.ndarray]) -> float:
        """Mean PSNR of decode(encode(x)) against x"""
        restored = CodecService.decode_batch(codec, CodecService.encode_batch(codec, images))
        return float(np.mean([MetricsService.psnr(a, b) for a, b in zip(restored, images)]))

    # ============================================
    # Checkpoint
    # ============================================

    @staticmethod
    def to_arrays(codec: ToyCodec) -> Dict[str, np.ndarray]:
        arrays = {
            f"{CodecService.META_PREFIX}in_channels": np.array([codec.in_channels], dtype=np.int64),
            f"{CodecService.META_PREFIX}latent_channels": np.array([codec.latent_channels], dtype=np.int64),
            f"{CodecService.META_PREFIX}hidden_widths": np.array(codec.hidden_widths, dtype=np.int64),
        }
        arrays.update(module_to_arrays(codec, prefix=CodecService.WEIGHT_PREFIX))
        return arrays

    @staticmethod
    def from_arrays(arrays: Dict[str, np.ndarray]) -> ToyCodec:
        meta = CodecService.META_PREFIX
        try:
            codec = ToyCodec(
                in_channels=int(arrays[f"{meta}in_channels"][0]),
                latent_channels=int(arrays[f"{meta}latent_channels"][0]),
                hidden_widths=[int(w) for w in arrays[f"{meta}hidden_widths"]],
            )
        except KeyError as exc:
            raise ContainerError(f"Codec checkpoint lacks {exc.args[0]}")
        arrays_to_module(codec, arrays, prefix=CodecService.WEIGHT_PREFIX)
        return CodecService.freeze(codec)
