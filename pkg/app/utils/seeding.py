"""
Seed derivation.

All randomness flows from one global seed through named substreams
(data, init, degrade, batch-order, ...), so two runs that differ in one
config axis still draw identical numbers everywhere else.
"""
import hashlib
import logging

import numpy as np
import torch

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 63) - 1


def derive_seed(seed: int, *names) -> int:
    """Derive a stable 63-bit substream seed from a base seed and a name path"""
    key = ":".join([str(seed), *[str(n) for n in names]])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & _SEED_MASK


def numpy_rng(seed: int, *names) -> np.random.Generator:
    """numpy Generator for a named substream"""
    return np.random.default_rng(derive_seed(seed, *names) if names else seed)


def torch_generator(seed: int, *names) -> torch.Generator:
    """CPU torch.Generator for a named substream"""
    generator = torch.Generator(device="cpu")
    generator.manual_seed(derive_seed(seed, *names) if names else seed)
    return generator


def seed_torch(seed: int, *names) -> None:
    """Seed torch's global RNG (used for module initialization) and pin deterministic kernels"""
    torch.manual_seed(derive_seed(seed, *names) if names else seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
