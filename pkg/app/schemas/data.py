"""
Data Schemas - degradation parameters, dataset manifests and corpus settings
"""
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.utils.errors import ManifestError

UINT64_MAX = (1 << 64) - 1


class DegradationParams(BaseModel):
    """Parameters of one blur → downsample → noise → JPEG degradation"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    scale_factor: int = Field(4, ge=1, description="Downscale factor (full scale: 4)")
    blur_sigma: float = Field(0.0, ge=0.0, description="Gaussian blur std in pixels")
    noise_sigma: float = Field(0.0, ge=0.0, description="Additive Gaussian noise std (intensity units)")
    jpeg_quality: int = Field(100, ge=1, le=100, description="JPEG quality; 100 skips the JPEG step")
    seed: int = Field(0, ge=0, le=UINT64_MAX, description="Noise seed")


class ManifestEntry(BaseModel):
    """One HQ source image"""
    model_config = ConfigDict(frozen=True)

    id: str = Field(..., min_length=1, pattern=r"^[^\t\n]+$")
    path: str = Field(..., min_length=1, pattern=r"^[^\t\n]+$", description="Path relative to the data root")


class DatasetManifest(BaseModel):
    """
    Ordered list of HQ entries plus split and sampling metadata.

    Stored on disk as:
        # split=<s> seed=<n>
        id<TAB>relative_path
        ...
    """
    entries: List[ManifestEntry] = Field(default_factory=list)
    split: Literal["train", "val", "test"] = "train"
    subset_size: int = Field(0, ge=0)
    seed: int = Field(0, ge=0, le=UINT64_MAX)

    @model_validator(mode="after")
    def validate_entries(self):
        ids = [entry.id for entry in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("Manifest ids must be unique")
        if self.subset_size > len(self.entries):
            raise ValueError(f"subset_size {self.subset_size} exceeds {len(self.entries)} entries")
        return self

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> List[str]:
        return [entry.id for entry in self.entries]

    def to_text(self) -> str:
        lines = [f"# split={self.split} seed={self.seed}"]
        lines.extend(f"{entry.id}\t{entry.path}" for entry in self.entries)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ManifestError("Manifest must start with a '# split=<s> seed=<n>' header")
        header = dict(
            part.split("=", 1) for part in lines[0].lstrip("#").split() if "=" in part
        )
        if "split" not in header or "seed" not in header:
            raise ManifestError(f"Malformed manifest header: {lines[0]!r}")
        entries = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ManifestError(f"Line {lineno}: expected 'id<TAB>path', got {line!r}")
            entries.append(ManifestEntry(id=parts[0], path=parts[1]))
        return cls(
            entries=entries,
            split=header["split"],
            subset_size=len(entries),
            seed=int(header["seed"]),
        )


class DataConfig(BaseModel):
    """data.*: corpus generation, subset sizes and degradation ranges"""
    model_config = ConfigDict(extra="forbid")

    corpus_size: int = Field(1000, ge=1, description="Toy faces generated (real pool: 70,000)")
    image_size: int = Field(64, ge=4, description="HQ side length in pixels, multiple of 4")
    train_subset: int = Field(600, ge=1, description="Training pairs sampled (full scale: 600)")
    eval_size: int = Field(64, ge=1, description="Fixed evaluation set size")
    codec_images: int = Field(512, ge=1, description="HQ images used to fit the codec")
    scale_factor: int = Field(4, ge=1, description="Degradation downscale (full scale: 4×)")
    blur_range: Tuple[float, float] = (0.0, 3.0)
    noise_range: Tuple[float, float] = (0.0, 0.08)
    jpeg_range: Tuple[int, int] = (40, 95)
    source_folder: Optional[str] = Field(None, description="Folder of HQ images replacing the toy corpus")

    @field_validator("image_size")
    @classmethod
    def validate_image_size(cls, v):
        if v % 4 != 0:
            raise ValueError("image_size must be a multiple of 4")
        return v

    @field_validator("blur_range", "noise_range", "jpeg_range")
    @classmethod
    def validate_range(cls, v):
        low, high = v
        if low < 0 or high < low:
            raise ValueError(f"Invalid range {v}")
        return v
