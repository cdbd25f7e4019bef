"""
Metrics Schemas - per-image rows, aggregates and evaluation settings
"""
import math
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

# No-reference scorers are external; the summary keeps slots for them
NO_REFERENCE_METRICS = ("niqe", "musiq", "clipiqa", "maniqa")


class MetricsRow(BaseModel):
    """Metrics of one (restored, reference) pair"""
    id: str
    psnr: float
    ssim: float
    deg: float
    lmd: Optional[float] = None


class MetricsReport(BaseModel):
    """Per-image rows plus set-level aggregates"""
    rows: List[MetricsRow] = Field(default_factory=list)
    fid: Optional[float] = None
    source: str = "restored"
    corpus_sizes: Dict[str, int] = Field(default_factory=dict)
    no_reference: Dict[str, Optional[float]] = Field(
        default_factory=lambda: {name: None for name in NO_REFERENCE_METRICS}
    )

    def means(self) -> Dict[str, Optional[float]]:
        """Aggregates recomputed from rows (fid is set-level and excluded)"""
        result: Dict[str, Optional[float]] = {}
        for key in ("psnr", "ssim", "deg", "lmd"):
            values = [getattr(row, key) for row in self.rows if getattr(row, key) is not None]
            result[key] = float(sum(values) / len(values)) if values else None
        return result

    def summary(self) -> Dict:
        """JSON-ready summary; +∞ is written as the string 'inf'"""
        def encode(value):
            if value is None:
                return None
            if math.isinf(value):
                return "inf" if value > 0 else "-inf"
            return value

        return {
            "source": self.source,
            "count": len(self.rows),
            "means": {key: encode(value) for key, value in self.means().items()},
            "fid": encode(self.fid),
            "corpus_sizes": dict(self.corpus_sizes),
            "no_reference": dict(self.no_reference),
        }


class EvalConfig(BaseModel):
    """eval.*: evaluation and diagnostics settings"""
    model_config = ConfigDict(extra="forbid")

    include_no_adapter: bool = Field(True, description="Also report the LQ-latent (no alignment) path")
    workers: int = Field(1, ge=1, description="joblib workers for per-image metrics")
    diagnostic_samples: int = Field(64, ge=2, description="Faces and noise images per compactness corpus")
    compactness_embedding: Literal["pixel", "identity", "structure"] = Field(
        "pixel", description="Embedding provider of the compactness diagnostic; identity and structure are the loss networks"
    )
    plateau_tolerance: float = Field(0.02, ge=0, description="Relative PSNR gap counted as a plateau")
