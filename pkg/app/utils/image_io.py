"""8-bit PNG storage for HQ/LQ images and JPEG round-trips for the degradation operator."""
import io
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image as PILImage

from app.utils.errors import ImageSizeError

PathLike = Union[str, Path]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(255.0)


def _to_pil(img: np.ndarray) -> PILImage.Image:
    data = to_uint8(img)
    if data.ndim != 3 or data.shape[2] not in (1, 3):
        raise ImageSizeError(f"Expected H×W×C with C in (1, 3), got {data.shape}")
    if data.shape[2] == 1:
        return PILImage.fromarray(data[:, :, 0], mode="L")
    return PILImage.fromarray(data, mode="RGB")


def _from_pil(pil: PILImage.Image, channels: int) -> np.ndarray:
    pil = pil.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(pil)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return from_uint8(arr)


def save_png(img: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # No ancillary chunks, so identical pixels give identical bytes
    _to_pil(img).save(path, format="PNG", optimize=False, compress_level=6)
    return path


def load_image(path: PathLike, channels: int = 3) -> np.ndarray:
    """Load PNG/JPEG as float32 H×W×C in [0, 1]"""
    with PILImage.open(path) as pil:
        return _from_pil(pil, channels)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Encode/decode through an in-memory JPEG at the given quality"""
    buffer = io.BytesIO()
    _to_pil(img).save(buffer, format="JPEG", quality=int(quality), subsampling=0)
    buffer.seek(0)
    with PILImage.open(buffer) as pil:
        return _from_pil(pil, img.shape[2])
