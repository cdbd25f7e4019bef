"""
Error types shared by every service.

Each error also derives from the builtin a caller would naturally catch
(ValueError for bad input, FileNotFoundError for missing artifacts, ...),
so generic handlers keep working.
"""
from typing import Any, Dict, List, Optional


class LafrError(Exception):
    """Base class for all toolkit errors"""


class ImageSizeError(LafrError, ValueError):
    """Image dimensions are invalid for the requested operation"""


class ShapeMismatchError(LafrError, ValueError):
    """Two arrays that must agree in shape do not"""


class DegradationError(LafrError, ValueError):
    """Degradation parameters are out of range"""


class ManifestError(LafrError, ValueError):
    """Dataset manifest is malformed or a sampling request is impossible"""


class EmptyCodebookError(LafrError, ValueError):
    """Codebook built with no entries; the constructor is the only place this is checked"""


class EmptySelectionError(LafrError, ValueError):
    """Parameter selector matched no layer"""


class LoRARankError(LafrError, ValueError):
    """Requested LoRA rank exceeds what the target layer supports"""


class MetricError(LafrError, ValueError):
    """Metric inputs violate the metric's preconditions"""


class FidComputationError(MetricError):
    """Matrix square root failed even after regularization"""


class ConfigError(LafrError, ValueError):
    """Unknown configuration key or unparsable value"""


class ContainerError(LafrError, ValueError):
    """Checkpoint container is corrupt or malformed"""


class MissingArtifactError(LafrError, FileNotFoundError):
    """A prerequisite artifact is missing from the workspace"""

    def __init__(self, artifact: str, path: Optional[str] = None):
        self.artifact = artifact
        self.path = path
        where = f" (expected at {path})" if path else ""
        super().__init__(f"Missing prerequisite artifact: {artifact}{where}")


class WorkspaceLockedError(LafrError, RuntimeError):
    """Another writer holds the output directory lock"""


class FrozenContractError(LafrError, RuntimeError):
    """Parameters that must stay frozen changed during training"""


class TrainingDivergenceError(LafrError, RuntimeError):
    """Loss became NaN or Inf"""

    def __init__(self, message: str, trace: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.trace = trace or []


class TrainingFailureError(LafrError, RuntimeError):
    """Training finished but did not reach its convergence threshold"""

    def __init__(self, message: str, trace: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.trace = trace or []
