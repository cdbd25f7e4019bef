"""
Data Service - toy corpus, LQ/HQ pair synthesis and dataset manifests

Features:
- Procedural face sprites with ground-truth landmarks
- Blur → bicubic downsample → noise → JPEG degradation
- Seed-deterministic subset sampling and manifest IO
- Bicubic upsampling of LQ images back to the HQ grid
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from app.schemas.data import DataConfig, DatasetManifest, DegradationParams, ManifestEntry
from app.utils.errors import DegradationError, ImageSizeError, ManifestError
from app.utils.image_io import jpeg_roundtrip
from app.utils.seeding import derive_seed, numpy_rng
from app.utils.tensors import check_image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DataService:
    """
    Data pipeline for the restoration toolkit

    Key Features:
    - Toy faces: oval head, hairline, two eyes, nose and mouth at jittered
      but structurally regular positions, varying skin/background tone
    - Degradation order: blur → downsample → noise → JPEG
    - JPEG at quality 100 is skipped so the identity chain is exact
    """

    # Landmark order returned with every toy face
    LANDMARK_NAMES = ("left_eye", "right_eye", "nose_tip", "mouth")

    # Sprite geometry jitter, in units of the image side
    HEAD_CENTER_JITTER = 0.04
    HEAD_RADIUS_X = (0.28, 0.34)
    HEAD_RADIUS_Y = (0.36, 0.42)
    EDGE_SOFTNESS_PX = 1.5

    # Tone ranges
    BACKGROUND_TONE = (0.15, 0.85)
    SKIN_TONE = (0.35, 0.85)
    HAIR_TONE = (0.05, 0.45)

    # ============================================
    # Toy corpus
    # ============================================

    @staticmethod
    def _soft_ellipse(u: np.ndarray, v: np.ndarray, cx: float, cy: float, rx: float, ry: float, size: int) -> np.ndarray:
        """Anti-aliased ellipse coverage in [0, 1]"""
        r = np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2)
        signed_px = (1.0 - r) * min(rx, ry) * size
        return np.clip(0.5 + signed_px / DataService.EDGE_SOFTNESS_PX, 0.0, 1.0)

    @staticmethod
    def _render_face(rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
        v, u = (np.mgrid[0:size, 0:size] + 0.5) / size

        def paint(img, mask, color):
            return img + mask[:, :, None] * (np.asarray(color)[None, None, :] - img)

        # Background with a gentle vertical gradient
        bg_base = rng.uniform(*DataService.BACKGROUND_TONE)
        bg_tint = rng.uniform(-0.08, 0.08, size=3)
        gradient = rng.uniform(-0.1, 0.1)
        img = np.clip(bg_base + bg_tint[None, None, :] + gradient * (v[:, :, None] - 0.5), 0.0, 1.0)

        jitter = DataService.HEAD_CENTER_JITTER
        cx = 0.5 + rng.uniform(-jitter, jitter)
        cy = 0.52 + rng.uniform(-jitter, jitter)
        rx = rng.uniform(*DataService.HEAD_RADIUS_X)
        ry = rng.uniform(*DataService.HEAD_RADIUS_Y)

        skin_base = rng.uniform(*DataService.SKIN_TONE)
        skin = np.clip(skin_base * np.array([1.0, 0.84, 0.72]) + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
        head = DataService._soft_ellipse(u, v, cx, cy, rx, ry, size)
        img = paint(img, head, skin)

        # Hair: cap of a slightly larger ellipse above the hairline
        hair = np.clip(rng.uniform(*DataService.HAIR_TONE) + rng.uniform(-0.03, 0.03, size=3), 0.0, 1.0)
        hairline = cy - ry * rng.uniform(0.45, 0.65)
        above = np.clip(0.5 + (hairline - v) * size / DataService.EDGE_SOFTNESS_PX, 0.0, 1.0)
        cap = DataService._soft_ellipse(u, v, cx, cy - 0.01, rx * 1.06, ry * 1.04, size) * above
        img = paint(img, cap, hair)

        # Eyes
        eye_y = cy - ry * rng.uniform(0.15, 0.25)
        eye_dx = rx * rng.uniform(0.38, 0.48)
        eye_rx = rng.uniform(0.045, 0.06)
        eye_ry = eye_rx * rng.uniform(0.5, 0.8)
        eye_tone = rng.uniform(0.05, 0.2)
        left_eye = (cx - eye_dx, eye_y)
        right_eye = (cx + eye_dx, eye_y)
        for ex, ey in (left_eye, right_eye):
            img = paint(img, DataService._soft_ellipse(u, v, ex, ey, eye_rx, eye_ry, size), [eye_tone] * 3)

        # Nose: vertical shadow ending at the tip
        nose_tip = (cx + rng.uniform(-0.01, 0.01), cy + ry * rng.uniform(0.05, 0.12))
        nose_len = rng.uniform(0.05, 0.07)
        nose = DataService._soft_ellipse(u, v, nose_tip[0], nose_tip[1] - nose_len / 2, 0.022, nose_len / 2 + 0.01, size)
        img = paint(img, nose, skin * 0.7)

        # Mouth
        mouth = (cx + rng.uniform(-0.01, 0.01), cy + ry * rng.uniform(0.4, 0.5))
        mouth_rx = rng.uniform(0.09, 0.14)
        mouth_ry = rng.uniform(0.02, 0.035)
        lips = np.array([0.62, 0.22, 0.26]) * rng.uniform(0.6, 1.0)
        img = paint(img, DataService._soft_ellipse(u, v, mouth[0], mouth[1], mouth_rx, mouth_ry, size), lips)

        landmarks = np.array([left_eye, right_eye, nose_tip, mouth], dtype=np.float64) * size
        return np.clip(img, 0.0, 1.0).astype(np.float32), landmarks

    @staticmethod
    def _validate_corpus_args(n: int, image_size: int) -> None:
        if n < 1:
            raise ValueError(f"n must be at least 1, got {n}")
        if image_size < 4 or image_size % 4 != 0:
            raise ImageSizeError(f"image_size must be a positive multiple of 4, got {image_size}")

    @staticmethod
    def generate_toy_faces(n: int, image_size: int, seed: int) -> List[np.ndarray]:
        """
        Generate n procedural face sprites.

        Face i depends only on (seed, i), so a longer corpus extends a
        shorter one with the same seed.

        Args:
            n: Number of faces
            image_size: Side length in pixels (multiple of 4)
            seed: Corpus seed

        Returns:
            List of image_size×image_size×3 float32 images in [0, 1]
        """
        return [img for img, _ in DataService.generate_toy_faces_with_landmarks(n, image_size, seed)]

    @staticmethod
    def generate_toy_faces_with_landmarks(n: int, image_size: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Same corpus as generate_toy_faces, paired with 4×2 (x, y) landmark arrays"""
        DataService._validate_corpus_args(n, image_size)
        return [
            DataService._render_face(numpy_rng(seed, "toy_face", i), image_size)
            for i in range(n)
        ]

    @staticmethod
    def generate_noise_images(n: int, image_size: int, seed: int, channels: int = 3) -> List[np.ndarray]:
        """Uniform-noise images, the unstructured reference corpus for compactness checks"""
        DataService._validate_corpus_args(n, image_size)
        rng = numpy_rng(seed, "noise_corpus")
        return [rng.uniform(0.0, 1.0, size=(image_size, image_size, channels)).astype(np.float32) for _ in range(n)]

    # ============================================
    # Resizing
    # ============================================

    @staticmethod
    def _resize_bicubic(img: np.ndarray, height: int, width: int) -> np.ndarray:
        tensor = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].float()
        shrinking = height < img.shape[0] or width < img.shape[1]
        resized = F.interpolate(tensor, size=(height, width), mode="bicubic", align_corners=False, antialias=shrinking)
        return np.clip(resized[0].numpy().transpose(1, 2, 0), 0.0, 1.0).astype(np.float32)

    @staticmethod
    def upsample(lq: np.ndarray, factor: int) -> np.ndarray:
        """
        Bicubic upsample to (H·factor)×(W·factor), clipped to [0, 1].

        factor=1 returns an unchanged copy.
        """
        check_image(lq, "lq")
        if factor < 1:
            raise ImageSizeError(f"Upsampling factor must be >= 1, got {factor}")
        if factor == 1:
            return lq.astype(np.float32, copy=True)
        return DataService._resize_bicubic(lq, lq.shape[0] * factor, lq.shape[1] * factor)

    # ============================================
    # Degradation
    # ============================================

    @staticmethod
    def degrade(hq: np.ndarray, params: DegradationParams) -> np.ndarray:
        """
        Apply blur → bicubic downsample → additive noise → JPEG.

        Pure function of (hq, params). Zero blur, zero noise, scale 1 and
        quality 100 return a bit-identical copy.

        Raises:
            ImageSizeError: scale_factor does not divide H and W
            DegradationError: JPEG quality outside [1, 100]
        """
        check_image(hq, "hq")
        height, width = hq.shape[:2]
        scale = params.scale_factor
        if scale < 1 or height % scale or width % scale:
            raise ImageSizeError(f"scale_factor {scale} must divide image size {height}×{width}")
        if not 1 <= params.jpeg_quality <= 100:
            raise DegradationError(f"JPEG quality must be in [1, 100], got {params.jpeg_quality}")

        out = hq.astype(np.float32, copy=True)
        if params.blur_sigma > 0:
            out = gaussian_filter(
                out.astype(np.float64), sigma=(params.blur_sigma, params.blur_sigma, 0), mode="reflect"
            ).astype(np.float32)
        if scale > 1:
            out = DataService._resize_bicubic(out, height // scale, width // scale)
        if params.noise_sigma > 0:
            rng = np.random.default_rng(params.seed)
            noise = rng.normal(0.0, params.noise_sigma, size=out.shape)
            out = np.clip(out.astype(np.float64) + noise, 0.0, 1.0).astype(np.float32)
        if params.jpeg_quality < 100:
            out = jpeg_roundtrip(out, params.jpeg_quality)
        return out

    @staticmethod
    def sample_degradation_params(config: DataConfig, seed: int, item_id: str) -> DegradationParams:
        """Randomized training degradation, uniform over the configured ranges"""
        rng = numpy_rng(seed, "degrade_params", item_id)
        return DegradationParams(
            scale_factor=config.scale_factor,
            blur_sigma=float(rng.uniform(*config.blur_range)),
            noise_sigma=float(rng.uniform(*config.noise_range)),
            jpeg_quality=int(rng.integers(config.jpeg_range[0], config.jpeg_range[1] + 1)),
            seed=derive_seed(seed, "degrade", item_id),
        )

    @staticmethod
    def evaluation_degradation_params(config: DataConfig, seed: int, item_id: str) -> DegradationParams:
        """Fixed evaluation degradation at the midpoint of every range"""
        return DegradationParams(
            scale_factor=config.scale_factor,
            blur_sigma=float(sum(config.blur_range) / 2),
            noise_sigma=float(sum(config.noise_range) / 2),
            jpeg_quality=int(round(sum(config.jpeg_range) / 2)),
            seed=derive_seed(seed, "degrade_eval", item_id),
        )

    # ============================================
    # Manifests
    # ============================================

    @staticmethod
    def sample_training_subset(manifest: DatasetManifest, n: int, seed: int) -> DatasetManifest:
        """
        Uniform sample of n entries without replacement.

        Entries keep their original relative order; the same seed always
        yields the same subset.

        Raises:
            ManifestError: n exceeds the manifest size
        """
        if n < 0 or n > len(manifest):
            raise ManifestError(f"Cannot sample {n} entries from a manifest of {len(manifest)}")
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(len(manifest), size=n, replace=False))
        return DatasetManifest(
            entries=[manifest.entries[i] for i in indices],
            split=manifest.split,
            subset_size=n,
            seed=seed,
        )

    @staticmethod
    def exclude(manifest: DatasetManifest, ids: Sequence[str]) -> DatasetManifest:
        """Manifest without the given ids (order preserved)"""
        drop = set(ids)
        entries = [entry for entry in manifest.entries if entry.id not in drop]
        return DatasetManifest(entries=entries, split=manifest.split, subset_size=len(entries), seed=manifest.seed)

    @staticmethod
    def toy_manifest(n: int, seed: int, split: str = "train") -> DatasetManifest:
        """Manifest naming the toy corpus files hq/face_00000.png, ..."""
        entries = [ManifestEntry(id=f"face_{i:05d}", path=f"hq/face_{i:05d}.png") for i in range(n)]
        return DatasetManifest(entries=entries, split=split, subset_size=n, seed=seed)

    @staticmethod
    def manifest_from_folder(folder: Union[str, Path], seed: int = 0, split: str = "train") -> DatasetManifest:
        """Manifest over user-supplied HQ images, sorted by file name"""
        folder = Path(folder)
        if not folder.is_dir():
            raise ManifestError(f"Image folder not found: {folder}")
        files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ManifestError(f"No PNG/JPEG images in {folder}")
        entries = [ManifestEntry(id=p.stem, path=str(p.resolve())) for p in files]
        logger.info(f"Indexed {len(entries)} images from {folder}")
        return DatasetManifest(entries=entries, split=split, subset_size=len(entries), seed=seed)

    @staticmethod
    def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.to_text(), encoding="utf-8")
        return path

    @staticmethod
    def read_manifest(path: Union[str, Path]) -> DatasetManifest:
        return DatasetManifest.from_text(Path(path).read_text(encoding="utf-8"))

    @staticmethod
    def resolve_path(manifest_dir: Union[str, Path], entry: ManifestEntry) -> Path:
        path = Path(entry.path)
        return path if path.is_absolute() else Path(manifest_dir) / path

    @staticmethod
    def landmark_table(ids: Sequence[str], landmarks: Sequence[np.ndarray]):
        """Landmarks as a DataFrame: id, then x/y columns per landmark name"""
        rows = []
        for item_id, points in zip(ids, landmarks):
            row = {"id": item_id}
            for name, (x, y) in zip(DataService.LANDMARK_NAMES, points):
                row[f"{name}_x"] = float(x)
                row[f"{name}_y"] = float(y)
            rows.append(row)
        return pd.DataFrame(rows)

    @staticmethod
    def landmarks_from_table(frame) -> dict:
        result = {}
        for record in frame.to_dict("records"):
            result[str(record["id"])] = np.array(
                [[record[f"{name}_x"], record[f"{name}_y"]] for name in DataService.LANDMARK_NAMES],
                dtype=np.float64,
            )
        return result

    @staticmethod
    def optional_landmarks(path: Union[str, Path]) -> Optional[dict]:
        path = Path(path)
        if not path.exists():
            return None
        return DataService.landmarks_from_table(pd.read_csv(path, dtype={"id": str}))
