"""Parameter checksums for the frozen-weights contracts."""
import hashlib
from typing import Iterable, Tuple

import numpy as np
import torch
from torch import nn


def array_checksum(*arrays: np.ndarray, text: str = "") -> int:
    """64-bit checksum over array bytes (dtype and shape included) and optional text"""
    digest = hashlib.blake2b(digest_size=8)
    digest.update(text.encode("utf-8"))
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        digest.update(str(arr.dtype).encode("ascii"))
        digest.update(str(arr.shape).encode("ascii"))
        digest.update(arr.tobytes())
    return int.from_bytes(digest.digest(), "little")


def named_tensor_checksum(named: Iterable[Tuple[str, torch.Tensor]]) -> int:
    """Checksum over (name, tensor) pairs, order-independent by sorting names"""
    digest = hashlib.blake2b(digest_size=8)
    for name, tensor in sorted(named, key=lambda item: item[0]):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return int.from_bytes(digest.digest(), "little")


def parameter_checksum(module: nn.Module) -> int:
    """
    Checksum of a module's parameters.

    Buffers (such as codebook usage counters) are excluded: they are
    diagnostics, not weights.
    """
    return named_tensor_checksum(module.named_parameters())
