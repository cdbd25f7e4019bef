"""Shared pieces of the training loops: optimizer, batching, divergence checks, progress bars."""
import logging
import math
import sys
from typing import Any, Dict, Iterable, Iterator, List, Optional

import torch
from tqdm import tqdm

from app.schemas.training import OptimizerConfig
from app.utils.errors import TrainingDivergenceError

logger = logging.getLogger(__name__)


def make_optimizer(params: Iterable[torch.nn.Parameter], learning_rate: float, optim: OptimizerConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        list(params),
        lr=learning_rate,
        betas=(optim.beta1, optim.beta2),
        eps=optim.eps,
        weight_decay=optim.weight_decay,
    )


def batch_indices(count: int, batch_size: int, generator: torch.Generator) -> Iterator[torch.Tensor]:
    """One shuffled epoch of index batches; the last batch may be short"""
    order = torch.randperm(count, generator=generator)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def check_finite(value: float, trace: List[Dict[str, Any]], stage: str) -> None:
    if not math.isfinite(value):
        logger.error(f"❌ {stage}: loss became {value}; aborting after {len(trace)} records")
        raise TrainingDivergenceError(f"{stage} diverged (loss={value})", trace=trace)


def progress(iterable: Iterable, desc: str, total: Optional[int] = None) -> Iterable:
    """tqdm bar that stays quiet when stderr is not a terminal"""
    return tqdm(iterable, desc=desc, total=total, leave=False, disable=not sys.stderr.isatty())
