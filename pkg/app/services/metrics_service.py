"""
Metrics Service - full-reference metrics and cluster diagnostics

Features:
- PSNR (+inf sentinel), SSIM (11×11 Gaussian window, σ=1.5)
- FID between Gaussian fits of two feature sets
- Identity degree (embedding angle) and landmark distance
- Intra-class distance and silhouette score
- Optional no-reference scorers registered at runtime
"""
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.signal import correlate2d
from scipy.spatial.distance import pdist
from sklearn.metrics import silhouette_samples

from app.schemas.metrics import NO_REFERENCE_METRICS, MetricsReport, MetricsRow
from app.utils.errors import FidComputationError, ImageSizeError, MetricError, ShapeMismatchError

logger = logging.getLogger(__name__)


class MetricsService:
    """
    Pure metric functions over numpy arrays.

    Per-image metrics fan out over joblib workers; results come back in
    input order and rows are sorted by id, so aggregates never depend on
    scheduling.
    """

    # SSIM constants (dynamic range 1)
    SSIM_WINDOW = 11
    SSIM_SIGMA = 1.5
    SSIM_K1 = 0.01
    SSIM_K2 = 0.03

    # FID regularization on retry
    FID_EPSILON = 1e-6

    # name → image scorer; only names in NO_REFERENCE_METRICS are accepted
    _no_reference_scorers: Dict[str, Callable[[np.ndarray], float]] = {}

    # ============================================
    # Pixel metrics
    # ============================================

    @staticmethod
    def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
        if a.shape != b.shape:
            raise ShapeMismatchError(f"Shapes differ: {a.shape} vs {b.shape}")

    @staticmethod
    def psnr(a: np.ndarray, b: np.ndarray) -> float:
        """10·log10(1/MSE) in dB; +inf when the images are identical"""
        MetricsService._check_pair(a, b)
        mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
        if mse == 0.0:
            return math.inf
        return 10.0 * math.log10(1.0 / mse)

    @staticmethod
    def _gaussian_window() -> np.ndarray:
        size = MetricsService.SSIM_WINDOW
        coords = np.arange(size, dtype=np.float64) - (size - 1) / 2
        g = np.exp(-(coords ** 2) / (2 * MetricsService.SSIM_SIGMA ** 2))
        g /= g.sum()
        return np.outer(g, g)

    @staticmethod
    def ssim(a: np.ndarray, b: np.ndarray) -> float:
        """Mean local SSIM over every valid window position and channel"""
        MetricsService._check_pair(a, b)
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.ndim == 2:
            a, b = a[:, :, None], b[:, :, None]
        size = MetricsService.SSIM_WINDOW
        if a.shape[0] < size or a.shape[1] < size:
            raise ImageSizeError(f"SSIM needs images of at least {size}×{size}, got {a.shape[:2]}")

        window = MetricsService._gaussian_window()
        c1 = MetricsService.SSIM_K1 ** 2
        c2 = MetricsService.SSIM_K2 ** 2

        def filt(x):
            return correlate2d(x, window, mode="valid")

        scores = []
        for ch in range(a.shape[2]):
            x, y = a[:, :, ch], b[:, :, ch]
            mu_x, mu_y = filt(x), filt(y)
            var_x = filt(x * x) - mu_x * mu_x
            var_y = filt(y * y) - mu_y * mu_y
            cov = filt(x * y) - mu_x * mu_y
            numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
            denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
            scores.append(np.mean(numerator / denominator))
        return float(np.mean(scores))

    # ============================================
    # Distribution metrics
    # ============================================

    @staticmethod
    def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
        """Tr((Σa Σb)^½) via the symmetric form Σa^½ Σb Σa^½"""
        vals, vecs = np.linalg.eigh(sigma_a)
        root_a = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
        product = root_a @ sigma_b @ root_a
        product = (product + product.T) / 2
        eig = np.linalg.eigvalsh(product)
        if not np.all(np.isfinite(eig)):
            raise np.linalg.LinAlgError("non-finite eigenvalues")
        return float(np.sqrt(np.clip(eig, 0.0, None)).sum())

    @staticmethod
    def fid(fa: np.ndarray, fb: np.ndarray) -> float:
        """
        Fréchet distance ‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½).

        Raises:
            MetricError: fewer than 2 rows or mismatched feature width
            FidComputationError: matrix square root fails even with εI added
        """
        fa = np.atleast_2d(np.asarray(fa, dtype=np.float64))
        fb = np.atleast_2d(np.asarray(fb, dtype=np.float64))
        if fa.shape[0] < 2 or fb.shape[0] < 2:
            raise MetricError("FID needs at least 2 feature rows per set")
        if fa.shape[1] != fb.shape[1]:
            raise MetricError(f"Feature widths differ: {fa.shape[1]} vs {fb.shape[1]}")
        if not (np.all(np.isfinite(fa)) and np.all(np.isfinite(fb))):
            raise MetricError("Feature sets must be finite")

        mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
        sigma_a = np.atleast_2d(np.cov(fa, rowvar=False))
        sigma_b = np.atleast_2d(np.cov(fb, rowvar=False))
        try:
            trace_sqrt = MetricsService._trace_sqrt_product(sigma_a, sigma_b)
        except np.linalg.LinAlgError:
            logger.warning("FID matrix square root failed; retrying with εI regularization")
            offset = MetricsService.FID_EPSILON * np.eye(sigma_a.shape[0])
            try:
                trace_sqrt = MetricsService._trace_sqrt_product(sigma_a + offset, sigma_b + offset)
            except np.linalg.LinAlgError as exc:
                raise FidComputationError(f"FID matrix square root failed: {exc}")
            sigma_a, sigma_b = sigma_a + offset, sigma_b + offset
        diff = mu_a - mu_b
        value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_sqrt)
        return max(value, 0.0)

    # ============================================
    # Identity and landmarks
    # ============================================

    @staticmethod
    def identity_degree(ea: np.ndarray, eb: np.ndarray) -> float:
        """
        Angle between two embeddings in degrees, [0, 180].

        Computed as 2·atan2(‖â − b̂‖, ‖â + b̂‖), exactly 0 for identical inputs.
        """
        ea = np.asarray(ea, dtype=np.float64).ravel()
        eb = np.asarray(eb, dtype=np.float64).ravel()
        if ea.shape != eb.shape:
            raise ShapeMismatchError(f"Embedding sizes differ: {ea.shape} vs {eb.shape}")
        na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
        if na == 0.0 or nb == 0.0:
            raise MetricError("identity_degree is undefined for a zero vector")
        ua, ub = ea / na, eb / nb
        return math.degrees(2.0 * math.atan2(np.linalg.norm(ua - ub), np.linalg.norm(ua + ub)))

    @staticmethod
    def landmark_distance(la: np.ndarray, lb: np.ndarray) -> float:
        """Mean Euclidean distance between corresponding (x, y) points"""
        la = np.asarray(la, dtype=np.float64)
        lb = np.asarray(lb, dtype=np.float64)
        if la.ndim != 2 or la.shape[1] != 2 or la.shape != lb.shape:
            raise ShapeMismatchError(f"Landmark sets must both be p×2 with equal p, got {la.shape} and {lb.shape}")
        return float(np.linalg.norm(la - lb, axis=1).mean())

    @staticmethod
    def locate_landmarks(img: np.ndarray, anchors: np.ndarray, radius: Optional[int] = None) -> np.ndarray:
        """
        Refine anchor points to the darkness-weighted centroid of a window around each.

        Eyes, nostril shading and lips are darker than the surrounding skin,
        so the centroid follows where the feature actually sits in img.
        """
        gray = np.asarray(img, dtype=np.float64).mean(axis=2)
        height, width = gray.shape
        radius = radius or max(2, int(round(min(height, width) / 16)))
        located = []
        for x, y in np.asarray(anchors, dtype=np.float64):
            cx, cy = int(np.clip(np.floor(x), 0, width - 1)), int(np.clip(np.floor(y), 0, height - 1))
            x0, x1 = max(0, cx - radius), min(width, cx + radius + 1)
            y0, y1 = max(0, cy - radius), min(height, cy + radius + 1)
            window = gray[y0:y1, x0:x1]
            weights = (window.max() - window) ** 2
            total = weights.sum()
            if total <= 0.0:
                located.append((x, y))
                continue
            ys, xs = np.mgrid[y0:y1, x0:x1] + 0.5
            located.append(((weights * xs).sum() / total, (weights * ys).sum() / total))
        return np.array(located, dtype=np.float64)

    # ============================================
    # Cluster diagnostics
    # ============================================

    @staticmethod
    def intra_class_distance(features: np.ndarray) -> float:
        """Mean pairwise Euclidean distance over all unordered pairs"""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[0] < 2:
            raise MetricError("intra_class_distance needs at least 2 rows")
        return float(pdist(features, metric="euclidean").mean())

    @staticmethod
    def silhouette(features: np.ndarray, labels: Sequence) -> float:
        """Mean silhouette coefficient; singleton classes contribute 0"""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        labels = np.asarray(labels)
        if labels.shape[0] != features.shape[0]:
            raise ShapeMismatchError(f"{labels.shape[0]} labels for {features.shape[0]} rows")
        classes = np.unique(labels)
        if len(classes) < 2:
            raise MetricError("silhouette needs at least 2 classes")
        if len(classes) == features.shape[0]:
            return 0.0
        return float(silhouette_samples(features, labels, metric="euclidean").mean())

    # ============================================
    # No-reference scorers
    # ============================================

    @classmethod
    def register_no_reference(cls, name: str, scorer: Optional[Callable[[np.ndarray], float]]) -> None:
        """Register (or with None, remove) an external scorer for one no-reference slot"""
        if name not in NO_REFERENCE_METRICS:
            raise MetricError(f"Unknown no-reference metric '{name}' (choose from {NO_REFERENCE_METRICS})")
        if scorer is None:
            cls._no_reference_scorers.pop(name, None)
        else:
            cls._no_reference_scorers[name] = scorer
            logger.info(f"Registered no-reference scorer '{name}'")

    @classmethod
    def no_reference_scores(cls, images: Sequence[np.ndarray]) -> Dict[str, Optional[float]]:
        """Mean score per registered slot; unregistered slots stay None"""
        scores: Dict[str, Optional[float]] = {name: None for name in NO_REFERENCE_METRICS}
        for name, scorer in sorted(cls._no_reference_scorers.items()):
            scores[name] = float(np.mean([scorer(img) for img in images])) if len(images) else None
        return scores

    # ============================================
    # Reports
    # ============================================

    @staticmethod
    def _row(item_id: str, restored: np.ndarray, reference: np.ndarray, emb_r: np.ndarray, emb_g: np.ndarray, anchors: Optional[np.ndarray]) -> MetricsRow:
        lmd = None
        if anchors is not None:
            lmd = MetricsService.landmark_distance(
                MetricsService.locate_landmarks(restored, anchors),
                MetricsService.locate_landmarks(reference, anchors),
            )
        return MetricsRow(
            id=item_id,
            psnr=MetricsService.psnr(restored, reference),
            ssim=MetricsService.ssim(restored, reference),
            deg=MetricsService.identity_degree(emb_r, emb_g),
            lmd=lmd,
        )

    @staticmethod
    def evaluate_pairs(
        ids: Sequence[str],
        restored: Sequence[np.ndarray],
        references: Sequence[np.ndarray],
        identity_provider,
        landmarks: Optional[Dict[str, np.ndarray]] = None,
        workers: int = 1,
        source: str = "restored",
    ) -> MetricsReport:
        """
        Per-image metrics plus set-level FID.

        Embeddings are computed in-process in one batch; only the numpy
        metrics are dispatched to joblib workers.
        """
        if not (len(ids) == len(restored) == len(references)):
            raise ShapeMismatchError("ids, restored and references must have equal length")
        if not ids:
            return MetricsReport(rows=[], source=source)
        emb_restored = identity_provider.embed_batch(list(restored))
        emb_reference = identity_provider.embed_batch(list(references))
        landmarks = landmarks or {}

        rows: List[MetricsRow] = Parallel(n_jobs=workers)(
            delayed(MetricsService._row)(
                item_id, res, ref, emb_restored[i], emb_reference[i], landmarks.get(item_id)
            )
            for i, (item_id, res, ref) in enumerate(zip(ids, restored, references))
        )
        rows.sort(key=lambda row: row.id)

        fid = None
        if len(ids) >= 2:
            fid = MetricsService.fid(emb_restored, emb_reference)
        logger.info(f"✓ Evaluated {len(rows)} pairs ({source})")
        return MetricsReport(
            rows=rows, fid=fid, source=source, no_reference=MetricsService.no_reference_scores(restored),
        )

    @staticmethod
    def report_frame(report: MetricsReport) -> pd.DataFrame:
        """Per-image CSV table; +inf PSNR prints as 'inf'"""
        columns = ["id", "psnr", "ssim", "deg", "lmd"]
        return pd.DataFrame([row.model_dump() for row in report.rows], columns=columns)
