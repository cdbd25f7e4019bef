"""Conversions between H×W×C numpy images and N×C×H×W torch batches."""
from typing import List, Sequence

import numpy as np
import torch

from app.utils.errors import ImageSizeError


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate the Image contract: H×W×C, C in (1, 3), values in [0, 1]"""
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] not in (1, 3):
        shape = getattr(img, "shape", None)
        raise ImageSizeError(f"{name} must be an H×W×C array with C in (1, 3), got shape {shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageSizeError(f"{name} has empty spatial size {img.shape[:2]}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ImageSizeError(f"{name} intensities must lie in [0, 1]")
    return img


def images_to_tensor(images: Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    batch = np.stack([np.asarray(img) for img in images], axis=0)
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).to(dtype)


def image_to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return images_to_tensor([img], dtype=dtype)


def tensor_to_images(batch: torch.Tensor) -> List[np.ndarray]:
    arr = batch.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return [np.ascontiguousarray(a, dtype=np.float32) for a in arr]


def latents_to_tensor(latents: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(latents, axis=0))).float()
